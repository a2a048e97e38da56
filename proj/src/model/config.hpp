#pragma once

#include <string>
#include <vector>

#include "core/errors.hpp"

namespace punet {

enum class Insertion { DownOnly, UpOnly, Both };

inline std::string insertion_name(Insertion ins) {
  switch (ins) {
    case Insertion::DownOnly: return "down";
    case Insertion::UpOnly: return "up";
    case Insertion::Both: return "both";
  }
  return "both";
}

inline Insertion insertion_from_name(const std::string& s) {
  if (s == "down") return Insertion::DownOnly;
  if (s == "up") return Insertion::UpOnly;
  if (s == "both") return Insertion::Both;
  throw ConfigError("unknown insertion scheme: '" + s + "' (expected down|up|both)");
}

// Rater identity attached to each sample: the aggregation case or one of the
// R individual raters (1-based).
struct RaterTag {
  int value = 0;  // 0 = aggregate, 1..R = rater j

  static RaterTag aggregate() { return RaterTag{0}; }
  static RaterTag rater(int j) { return RaterTag{j}; }
  bool is_aggregate() const { return value == 0; }

  std::string name() const { return value == 0 ? "c" : "r" + std::to_string(value); }

  bool operator==(const RaterTag& o) const { return value == o.value; }
};

inline RaterTag rater_tag_from_name(const std::string& s) {
  if (s == "c") return RaterTag::aggregate();
  if (s.size() >= 2 && s[0] == 'r') return RaterTag::rater(std::stoi(s.substr(1)));
  throw ArgError("unknown rater tag: '" + s + "'");
}

struct UNetConfig {
  int stages = 3;         // N downsampling and N upsampling layers
  int base_channels = 16;
  int input_h = 64;
  int input_w = 64;
  int classes = 2;        // disc, cup
  int heads = 2;          // MSA heads
  int ffn_ratio = 4;
  int prompt_dim = 16;    // d, stage-0 prompt embedding width
  int prompt_tokens = 1;  // T
  Insertion insertion = Insertion::Both;
  int raters = 6;         // R; the bank holds R+1 prompts
  int seg_heads = 1;      // >1 only for the multi-head baseline
  bool use_prompts = true;

  void validate() const {
    if (stages < 1) throw ConfigError("stages must be >= 1");
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (classes < 1) throw ConfigError("classes must be >= 1");
    if (heads < 1) throw ConfigError("heads must be >= 1");
    if (ffn_ratio < 1) throw ConfigError("ffn_ratio must be >= 1");
    if (prompt_dim < 1) throw ConfigError("prompt_dim must be >= 1");
    if (prompt_tokens < 1) throw ConfigError("prompt_tokens must be >= 1");
    if (raters < 1) throw ConfigError("raters must be >= 1");
    if (seg_heads < 1) throw ConfigError("seg_heads must be >= 1");
    int div = 1 << stages;
    if (input_h % div != 0 || input_w % div != 0) {
      throw ConfigError("input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                        " not divisible by 2^" + std::to_string(stages));
    }
    // Attention width must split evenly across heads at every insertion point;
    // channel counts are base * 2^i, so checking the narrowest suffices.
    if ((base_channels * 2) % heads != 0) {
      throw ConfigError("first insertion width " + std::to_string(base_channels * 2) +
                        " not divisible by heads");
    }
  }

  // Channel count of stage i features (i = 0 is the stem output).
  int channels(int i) const { return base_channels << i; }
};

enum class FineTuneMode { Full, HeadOnly, PromptAndHead };

inline std::string mode_name(FineTuneMode m) {
  switch (m) {
    case FineTuneMode::Full: return "full";
    case FineTuneMode::HeadOnly: return "head";
    case FineTuneMode::PromptAndHead: return "prompt";
  }
  return "full";
}

inline FineTuneMode mode_from_name(const std::string& s) {
  if (s == "full") return FineTuneMode::Full;
  if (s == "head") return FineTuneMode::HeadOnly;
  if (s == "prompt") return FineTuneMode::PromptAndHead;
  throw ConfigError("unknown fine-tune mode: '" + s + "' (expected full|head|prompt)");
}

enum class TrainingStrategy { IndividualOnly, FusionOnly, Mix };

inline std::string strategy_name(TrainingStrategy s) {
  switch (s) {
    case TrainingStrategy::IndividualOnly: return "individual";
    case TrainingStrategy::FusionOnly: return "fusion";
    case TrainingStrategy::Mix: return "mix";
  }
  return "mix";
}

inline TrainingStrategy strategy_from_name(const std::string& s) {
  if (s == "individual") return TrainingStrategy::IndividualOnly;
  if (s == "fusion") return TrainingStrategy::FusionOnly;
  if (s == "mix") return TrainingStrategy::Mix;
  throw ConfigError("unknown strategy: '" + s + "' (expected individual|fusion|mix)");
}

}  // namespace punet
