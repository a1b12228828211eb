// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

namespace fsq {

namespace detail {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) out = (out << 8) | ((v >> (8 * i)) & 0xff);
    return out;
  }
}

template <typename F, typename U>
void write_le(std::ostream& out, std::span<const F> values) {
  std::vector<U> raw(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) raw[i] = to_little(std::bit_cast<U>(values[i]));
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(U)));
}

template <typename F, typename U>
bool read_le(std::istream& in, std::span<F> values) {
  std::vector<U> raw(values.size());
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(U)));
  if (static_cast<std::size_t>(in.gcount()) != raw.size() * sizeof(U)) return false;
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = std::bit_cast<F>(to_little(raw[i]));
  return true;
}

}  // namespace detail

inline void write_le_f64(std::ostream& out, std::span<const double> v) {
  detail::write_le<double, std::uint64_t>(out, v);
}
inline bool read_le_f64(std::istream& in, std::span<double> v) {
  return detail::read_le<double, std::uint64_t>(in, v);
}
inline void write_le_f32(std::ostream& out, std::span<const float> v) {
  detail::write_le<float, std::uint32_t>(out, v);
}
inline bool read_le_f32(std::istream& in, std::span<float> v) {
  return detail::read_le<float, std::uint32_t>(in, v);
}

}  // namespace fsq
