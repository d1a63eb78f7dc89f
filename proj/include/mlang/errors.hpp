#pragma once

#include <stdexcept>
#include <string>

namespace mlang {

// Base for every error thrown by the library. Each concrete type carries a
// stable name() used by the CLI to emit machine-readable error JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string name, const std::string& what)
      : std::runtime_error(what), name_(std::move(name)) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

#define MLANG_DEFINE_ERROR(Name)                                          \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(#Name, what) {}        \
  }

// motion-core
MLANG_DEFINE_ERROR(DegenerateRotation);
MLANG_DEFINE_ERROR(ShapeMismatch);
MLANG_DEFINE_ERROR(TooShort);

// motion-codec
MLANG_DEFINE_ERROR(EmptyDataset);
MLANG_DEFINE_ERROR(DivergedTraining);
MLANG_DEFINE_ERROR(IndexOutOfRange);

// speech-codec
MLANG_DEFINE_ERROR(TooShortAudio);
MLANG_DEFINE_ERROR(InsufficientData);

// text-codec
MLANG_DEFINE_ERROR(VocabTooSmall);
MLANG_DEFINE_ERROR(EmptyCorpus);
MLANG_DEFINE_ERROR(UnknownId);

// multimodal-vocab
MLANG_DEFINE_ERROR(UnknownToken);
MLANG_DEFINE_ERROR(MalformedTokenString);

// task-forge
MLANG_DEFINE_ERROR(MissingPart);
MLANG_DEFINE_ERROR(BadRatio);
MLANG_DEFINE_ERROR(EmptyStream);
MLANG_DEFINE_ERROR(MissingSlot);
MLANG_DEFINE_ERROR(UnknownTaskKind);

// seq-model
MLANG_DEFINE_ERROR(SequenceTooLong);
MLANG_DEFINE_ERROR(EmptyTarget);
MLANG_DEFINE_ERROR(InvalidConfig);
MLANG_DEFINE_ERROR(CorruptCheckpoint);

// metrics
MLANG_DEFINE_ERROR(DimensionMismatch);
MLANG_DEFINE_ERROR(NotPSD);
MLANG_DEFINE_ERROR(NoBeats);
MLANG_DEFINE_ERROR(TooFewClips);
MLANG_DEFINE_ERROR(LengthMismatch);

// io / pipeline
MLANG_DEFINE_ERROR(IoError);
MLANG_DEFINE_ERROR(VocabHashMismatch);
MLANG_DEFINE_ERROR(ConfigError);
MLANG_DEFINE_ERROR(MissingArtifact);

#undef MLANG_DEFINE_ERROR

}  // namespace mlang
