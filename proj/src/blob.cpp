#include "mlang/blob.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace mlang {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "blob format assumes a little-endian host");

void ensure_dir(const std::string& path) {
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec) throw IoError("cannot create directory " + path + ": " + ec.message());
}

bool path_exists(const std::string& path) { return fs::exists(path); }

void write_blob(const std::string& dir, const std::string& stem,
                const NamedTensorData& tensors) {
  ensure_dir(dir);
  json manifest;
  manifest["dtype"] = "f32";
  manifest["tensors"] = json::array();
  int64_t offset = 0;
  std::ofstream bin(fs::path(dir) / (stem + ".bin"), std::ios::binary);
  if (!bin) throw IoError("cannot write blob in " + dir);
  for (const auto& [name, sv] : tensors) {
    const auto& [shape, values] = sv;
    manifest["tensors"].push_back(
        {{"name", name}, {"shape", shape}, {"offset", offset}});
    std::vector<float> f(values.size());
    for (size_t i = 0; i < values.size(); ++i) f[i] = float(values[i]);
    bin.write(reinterpret_cast<const char*>(f.data()),
              std::streamsize(f.size() * sizeof(float)));
    offset += int64_t(values.size());
  }
  manifest["total_floats"] = offset;
  if (!bin) throw IoError("write failure on blob in " + dir);
  bin.close();
  write_json_file((fs::path(dir) / (stem + ".json")).string(), manifest);
}

std::unordered_map<std::string, std::pair<std::vector<int>, std::vector<double>>>
read_blob(const std::string& dir, const std::string& stem) {
  const auto manifest_path = fs::path(dir) / (stem + ".json");
  const auto bin_path = fs::path(dir) / (stem + ".bin");
  if (!fs::exists(manifest_path) || !fs::exists(bin_path))
    throw IoError("missing blob " + stem + " in " + dir);
  json manifest;
  try {
    manifest = read_json_file(manifest_path.string());
  } catch (const Error&) {
    throw CorruptCheckpoint("unreadable manifest " + manifest_path.string());
  }
  if (!manifest.contains("tensors") || !manifest.contains("total_floats"))
    throw CorruptCheckpoint("manifest missing fields in " + dir);
  const int64_t total = manifest["total_floats"].get<int64_t>();
  std::ifstream bin(bin_path, std::ios::binary);
  std::vector<float> raw(static_cast<size_t>(total));
  bin.read(reinterpret_cast<char*>(raw.data()),
           std::streamsize(raw.size() * sizeof(float)));
  if (bin.gcount() != std::streamsize(raw.size() * sizeof(float)))
    throw CorruptCheckpoint("blob truncated: " + bin_path.string());

  std::unordered_map<std::string, std::pair<std::vector<int>, std::vector<double>>> out;
  for (const auto& t : manifest["tensors"]) {
    const std::string name = t["name"].get<std::string>();
    const std::vector<int> shape = t["shape"].get<std::vector<int>>();
    const int64_t offset = t["offset"].get<int64_t>();
    int64_t n = 1;
    for (int d : shape) n *= d;
    if (offset < 0 || offset + n > total)
      throw CorruptCheckpoint("tensor " + name + " outside blob");
    std::vector<double> v(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) v[size_t(i)] = double(raw[size_t(offset + i)]);
    out[name] = std::make_pair(shape, std::move(v));
  }
  return out;
}

bool blob_exists(const std::string& dir, const std::string& stem) {
  return fs::exists(fs::path(dir) / (stem + ".json")) &&
         fs::exists(fs::path(dir) / (stem + ".bin"));
}

void save_params(const std::string& dir, const std::string& stem,
                 nn::ParamStore& params) {
  nn::round_to_f32(params);
  NamedTensorData data;
  for (auto& it : params.items) {
    std::vector<double> v(size_t(it.second.numel()));
    std::copy(it.second.value().data(), it.second.value().data() + it.second.numel(),
              v.begin());
    data.emplace_back(it.first, std::make_pair(it.second.shape(), std::move(v)));
  }
  write_blob(dir, stem, data);
}

void load_params(const std::string& dir, const std::string& stem,
                 nn::ParamStore& params) {
  auto blob = read_blob(dir, stem);
  for (auto& it : params.items) {
    auto found = blob.find(it.first);
    if (found == blob.end())
      throw CorruptCheckpoint("checkpoint missing tensor " + it.first);
    if (found->second.first != it.second.shape())
      throw CorruptCheckpoint("shape mismatch for tensor " + it.first);
    std::copy(found->second.second.begin(), found->second.second.end(),
              it.second.value().data());
  }
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw IoError("json parse failure in " + path + ": " + e.what());
  }
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failure on " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failure on " + path);
}

std::string fnv1a_hex(const std::string& data) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  snprintf(buf, sizeof buf, "%016llx", (unsigned long long)h);
  return std::string(buf);
}

}  // namespace mlang
