#pragma once

#include <span>
#include <string>
#include <string_view>

namespace fedsim {

// Formats a double with 17 significant digits so that parsing the text
// recovers the exact bit pattern. Non-finite values are not representable in
// JSON; callers must handle them before serializing (see summary NaN
// sentinel handling in experiment.cpp).
std::string format_double(double v);

// Minimal JSON writing helpers for the hand-written emitters (model
// documents, dataset lines, metrics). Reading always goes through
// nlohmann::json; writing is done by hand to pin number formatting and key
// order byte-for-byte.
void json_append_string(std::string& out, std::string_view s);
void json_append_double_array(std::string& out, std::span<const double> values);
void json_append_int_array(std::string& out, std::span<const int> values);

}  // namespace fedsim
