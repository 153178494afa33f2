#pragma once

#include <string>

namespace adaptime {

// Shortest round-trip representation; "nan", "inf" and "-inf" otherwise.
std::string format_double(double value);
// Quotes a field when it contains a comma, quote or line break.
std::string csv_field(const std::string& field);

}  // namespace adaptime
