#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace tnn {

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <class T, class... Rest>
void cat_into(std::ostringstream& out, const T& head, const Rest&... rest) {
  out << head;
  cat_into(out, rest...);
}
}  // namespace detail

// Build an error message from heterogeneous pieces.
template <class... Args>
std::string cat(const Args&... args) {
  std::ostringstream out;
  detail::cat_into(out, args...);
  return out.str();
}

template <class... Args>
[[noreturn]] void fail(const Args&... args) {
  throw std::invalid_argument(cat(args...));
}

template <class... Args>
[[noreturn]] void fail_io(const Args&... args) {
  throw std::runtime_error(cat(args...));
}

// Normalize a possibly negative mode index (-1 = last) and range-check it.
inline int norm_mode(int mode, int order, const char* what) {
  int m = mode < 0 ? mode + order : mode;
  if (m < 0 || m >= order)
    fail(what, ": mode ", mode, " out of range for order ", order);
  return m;
}

}  // namespace tnn
