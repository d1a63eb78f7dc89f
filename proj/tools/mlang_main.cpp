// mlang: command-line driver for the motion-language pipeline.
//
// Usage: mlang <command> --config <path> [--seed N] [--override key=value ...]
// plus per-command options; see `mlang --help`.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mlang/blob.hpp"
#include "mlang/pipeline.hpp"

using nlohmann::json;

int main(int argc, char** argv) {
  CLI::App app{"mlang: desk-scale motion-language pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand

  std::string config_path;
  std::vector<std::string> overrides;
  int64_t seed_flag = -1;
  app.add_option("--config", config_path, "JSON config file")->capture_default_str();
  app.add_option("--seed", seed_flag, "override the config seed");
  app.add_option("--override", overrides,
                 "config override key.path=value (repeatable)");

  struct Sub {
    CLI::App* cmd;
    std::map<std::string, std::string> flags;
  };
  std::map<std::string, Sub> subs;
  auto add_cmd = [&](const std::string& name, const std::string& desc) -> Sub& {
    Sub& s = subs[name];
    s.cmd = app.add_subcommand(name, desc);
    return s;
  };
  auto opt = [&](Sub& s, const std::string& key, const std::string& desc) {
    s.flags[key] = "";
    s.cmd->add_option("--" + key, s.flags[key], desc);
  };

  add_cmd("synth-data", "generate the paired synthetic corpus");
  {
    Sub& s = add_cmd("codec-train", "train one part codec or the translation predictor");
    opt(s, "part", "face|hands|upper|lower|translation");
  }
  add_cmd("audio-fit", "fit the acoustic codebook with k-means");
  add_cmd("text-train", "train the byte-pair text tokenizer");
  add_cmd("vocab-build", "assemble the unified multimodal vocabulary");
  {
    Sub& s = add_cmd("tasks-compile", "compile training samples");
    opt(s, "stage", "pretrain|posttrain");
  }
  add_cmd("pretrain", "modality-alignment pre-training");
  add_cmd("posttrain", "instruction-following post-training");
  {
    Sub& s = add_cmd("generate", "run the model on one input");
    opt(s, "task", "audio2motion|text2motion|motion2emotion|editable");
    opt(s, "audio", "input wav (16 kHz mono)");
    opt(s, "text", "caption text");
    opt(s, "motion", "input motion-json");
    opt(s, "model", "checkpoint directory (default: post-trained final)");
    opt(s, "out", "output path prefix");
  }
  {
    Sub& s = add_cmd("eval", "run the metric suite on the held-out split");
    opt(s, "model", "checkpoint directory (default: post-trained final)");
  }
  {
    Sub& s = add_cmd("export", "export marker positions for external viewers");
    opt(s, "motion", "input motion-json");
    opt(s, "format", "csv|json");
    opt(s, "out", "output file");
  }

  CLI11_PARSE(app, argc, argv);

  std::string command;
  std::map<std::string, std::string> flags;
  for (auto& [name, sub] : subs) {
    if (!sub.cmd->parsed()) continue;
    command = name;
    for (auto& [key, value] : sub.flags)
      if (!value.empty()) flags[key] = value;
  }

  mlang::CommandResult result;
  try {
    json raw = json::object();
    if (!config_path.empty()) raw = mlang::read_json_file(config_path);
    for (const auto& entry : overrides) mlang::apply_override(raw, entry);
    if (seed_flag >= 0) raw["seed"] = uint64_t(seed_flag);
    mlang::PipelineConfig cfg = mlang::config_from_json(raw);
    result = mlang::run_command(command, cfg, flags);
  } catch (const mlang::Error& e) {
    result.exit_code = e.name() == "ConfigError" || e.name() == "InvalidConfig"
                           ? mlang::kExitConfigError
                           : mlang::kExitFailure;
    result.output = json{{"error", {{"type", e.name()}, {"message", e.what()}}}};
  } catch (const std::exception& e) {
    result.exit_code = mlang::kExitFailure;
    result.output = json{{"error", {{"type", "InternalError"}, {"message", e.what()}}}};
  }

  std::cout << result.output.dump(2) << "\n";
  return result.exit_code;
}
