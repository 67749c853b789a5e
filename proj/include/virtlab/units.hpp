#pragma once

#include <compare>

namespace virtlab {

/// Optical length. Stored in nanometres; construct through the named
/// factories or literals so mm/um/nm never get mixed.
class Length {
public:
  constexpr Length() = default;

  static constexpr Length nm(double v) { return Length(v); }
  static constexpr Length um(double v) { return Length(v * 1e3); }
  static constexpr Length mm(double v) { return Length(v * 1e6); }

  constexpr double in_nm() const { return nm_; }
  constexpr double in_um() const { return nm_ * 1e-3; }
  constexpr double in_mm() const { return nm_ * 1e-6; }

  constexpr Length operator*(double k) const { return Length(nm_ * k); }
  constexpr Length operator/(double k) const { return Length(nm_ / k); }
  constexpr double operator/(Length o) const { return nm_ / o.nm_; }
  constexpr Length operator+(Length o) const { return Length(nm_ + o.nm_); }
  constexpr Length operator-(Length o) const { return Length(nm_ - o.nm_); }
  constexpr auto operator<=>(const Length&) const = default;

private:
  constexpr explicit Length(double v) : nm_(v) {}
  double nm_ = 0.0;
};

constexpr Length operator*(double k, Length l) { return l * k; }

namespace literals {
constexpr Length operator""_nm(long double v) { return Length::nm(static_cast<double>(v)); }
constexpr Length operator""_nm(unsigned long long v) { return Length::nm(static_cast<double>(v)); }
constexpr Length operator""_um(long double v) { return Length::um(static_cast<double>(v)); }
constexpr Length operator""_um(unsigned long long v) { return Length::um(static_cast<double>(v)); }
constexpr Length operator""_mm(long double v) { return Length::mm(static_cast<double>(v)); }
constexpr Length operator""_mm(unsigned long long v) { return Length::mm(static_cast<double>(v)); }
}  // namespace literals

}  // namespace virtlab
