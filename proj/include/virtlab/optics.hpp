#pragma once

// Closed-form confocal design relations: collection bound, Rayleigh
// resolution, back-aperture filling and pinhole/fibre matching.

#include <cmath>
#include <ostream>
#include <sstream>
#include <string>

#include "virtlab/error.hpp"
#include "virtlab/units.hpp"

namespace virtlab::optics {

struct ObjectiveSpec {
  double na = 0.9;
  double n_immersion = 1.0;
  double magnification = 50.0;
  Length tube_length = Length::mm(180.0);

  /// Throws domain errors for broken invariants. `allow_hemisphere` admits
  /// na == n (the theta = 90 degree limit) which only the collection bound
  /// can evaluate.
  void validate(bool allow_hemisphere = false) const {
    if (!(na > 0.0)) fail(errc::domain, "numerical aperture must be > 0");
    if (!(n_immersion > 0.0)) fail(errc::domain, "immersion index must be > 0");
    if (na > n_immersion || (!allow_hemisphere && na == n_immersion))
      fail(errc::domain, "numerical aperture must be below the immersion index (angle undefined)");
    if (!(magnification > 0.0)) fail(errc::domain, "magnification must be > 0");
    if (!(tube_length.in_nm() > 0.0)) fail(errc::domain, "tube length must be > 0");
  }

  double sin_theta() const { return na / n_immersion; }
  double cos_theta() const {
    const double s = sin_theta();
    return std::sqrt(1.0 - s * s);
  }
};

struct ConfocalGeometry {
  Length focus_lens_focal_length = Length::mm(100.0);
  Length pump_wavelength = Length::nm(532.0);
  Length pl_wavelength = Length::nm(700.0);

  void validate() const {
    if (!(focus_lens_focal_length.in_nm() > 0.0)) fail(errc::domain, "focus lens focal length must be > 0");
    if (!(pump_wavelength.in_nm() > 0.0)) fail(errc::domain, "pump wavelength must be > 0");
    if (!(pl_wavelength.in_nm() > 0.0)) fail(errc::domain, "PL wavelength must be > 0");
    if (pl_wavelength < pump_wavelength)
      fail(errc::domain, "PL wavelength must not be shorter than the pump wavelength");
  }
};

struct Resolution {
  Length r_min;
  Length z_min;
  Length r_airy;
};

struct ConfocalMatch {
  double m_tot = 0.0;
  Length r_hole;
  double na_fiber = 0.0;
};

struct OpticsReport {
  double eta_bound = 0.0;
  Length r_min;
  Length z_min;
  Length beam_diameter;
  double m_lens = 0.0;
  double m_tot = 0.0;
  Length r_hole;
  double na_fiber = 0.0;
  Length r_airy;
};

/// Upper bound on the collected fraction for isotropic emission,
/// (1 - cos theta) / 2. Written as s^2 / (2 (1 + cos theta)) to stay exact
/// for vanishing apertures.
inline double collection_bound(const ObjectiveSpec& obj) {
  obj.validate(/*allow_hemisphere=*/true);
  const double s = obj.sin_theta();
  if (s == 1.0) return 0.5;
  return 0.5 * s * s / (1.0 + obj.cos_theta());
}

inline Resolution resolutions(const ObjectiveSpec& obj, Length wavelength) {
  obj.validate();
  if (!(wavelength.in_nm() > 0.0)) fail(errc::domain, "wavelength must be > 0");
  Resolution r;
  r.r_min = wavelength * (0.61 / obj.na);
  r.r_airy = r.r_min * 2.0;
  r.z_min = wavelength * (1.4 * obj.n_immersion / (obj.na * obj.na));
  return r;
}

/// Objective back-aperture diameter the excitation beam has to fill.
inline Length excitation_beam_diameter(const ObjectiveSpec& obj) {
  obj.validate();
  const double s = obj.sin_theta();
  const double tan_theta = s / std::sqrt(1.0 - s * s);
  const Length f_obj = obj.tube_length / obj.magnification;
  return f_obj * (2.0 * tan_theta);
}

inline ConfocalMatch confocal_matching(const ObjectiveSpec& obj, const ConfocalGeometry& geo) {
  obj.validate();
  geo.validate();
  ConfocalMatch m;
  m.m_tot = obj.magnification * (geo.focus_lens_focal_length / obj.tube_length);
  m.r_hole = geo.pl_wavelength * (1.22 * m.m_tot / obj.na);
  m.na_fiber = obj.na / m.m_tot;
  return m;
}

inline OpticsReport report(const ObjectiveSpec& obj, const ConfocalGeometry& geo) {
  OpticsReport rep;
  rep.eta_bound = collection_bound(obj);
  const Resolution res = resolutions(obj, geo.pump_wavelength);
  rep.r_min = res.r_min;
  rep.z_min = res.z_min;
  rep.r_airy = res.r_airy;
  rep.beam_diameter = excitation_beam_diameter(obj);
  const ConfocalMatch cm = confocal_matching(obj, geo);
  rep.m_lens = geo.focus_lens_focal_length / obj.tube_length;
  rep.m_tot = cm.m_tot;
  rep.r_hole = cm.r_hole;
  rep.na_fiber = cm.na_fiber;
  return rep;
}

namespace detail {
inline std::string fmt_num(double v, int prec) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}
}  // namespace detail

/// Human table followed by `key=value` lines (SI-prefixed units in the key).
inline void print_report(std::ostream& os, const OpticsReport& r) {
  auto row = [&](const char* label, const std::string& value, const char* unit) {
    std::string l = label;
    l.resize(24, ' ');
    std::string v = value;
    if (v.size() < 12) v.insert(0, 12 - v.size(), ' ');
    os << l << v << ' ' << unit << '\n';
  };
  row("collection bound eta", detail::fmt_num(r.eta_bound, 6), "");
  row("lateral resolution", detail::fmt_num(r.r_min.in_nm(), 5), "nm");
  row("axial resolution", detail::fmt_num(r.z_min.in_nm(), 5), "nm");
  row("Airy radius", detail::fmt_num(r.r_airy.in_nm(), 5), "nm");
  row("beam diameter", detail::fmt_num(r.beam_diameter.in_mm(), 5), "mm");
  row("lens magnification", detail::fmt_num(r.m_lens, 5), "");
  row("total magnification", detail::fmt_num(r.m_tot, 5), "");
  row("pinhole radius", detail::fmt_num(r.r_hole.in_um(), 5), "um");
  row("fibre NA", detail::fmt_num(r.na_fiber, 5), "");
  os << "note: a pinhole down to 2/3 of the matched radius (" << detail::fmt_num(r.r_hole.in_um() * 2.0 / 3.0, 5)
     << " um) sharpens resolution at the cost of throughput\n";
  os.precision(17);
  os << "eta_bound=" << r.eta_bound << '\n'
     << "r_min_nm=" << r.r_min.in_nm() << '\n'
     << "z_min_nm=" << r.z_min.in_nm() << '\n'
     << "r_airy_nm=" << r.r_airy.in_nm() << '\n'
     << "beam_diameter_mm=" << r.beam_diameter.in_mm() << '\n'
     << "m_lens=" << r.m_lens << '\n'
     << "m_tot=" << r.m_tot << '\n'
     << "r_hole_um=" << r.r_hole.in_um() << '\n'
     << "na_fiber=" << r.na_fiber << '\n';
}

}  // namespace virtlab::optics
