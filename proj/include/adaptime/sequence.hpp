#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace adaptime {

using Token = std::uint32_t;

// One patient's tokenised event stream. `times` (hours since admission) are
// read only by the fixed-time windowing policy.
struct LabeledSequence {
  std::string id;
  std::vector<Token> tokens;
  std::vector<double> times;
  int label = 0;

  std::size_t size() const { return tokens.size(); }
  friend bool operator==(const LabeledSequence&, const LabeledSequence&) = default;
};

}  // namespace adaptime
