#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hand/core/error.hpp"
#include "hand/core/tensor.hpp"

namespace hand::preprocess {

enum class Laterality { Left, Right };
enum class View { MLO, CC };

inline std::string to_string(Laterality l) { return l == Laterality::Left ? "L" : "R"; }
inline std::string to_string(View v) { return v == View::MLO ? "MLO" : "CC"; }

inline Laterality laterality_from_string(const std::string& s) {
  if (s == "L" || s == "Left" || s == "left" || s == "LEFT") return Laterality::Left;
  if (s == "R" || s == "Right" || s == "right" || s == "RIGHT") return Laterality::Right;
  throw input_error("unknown laterality: '" + s + "'");
}

inline View view_from_string(const std::string& s) {
  if (s == "MLO" || s == "mlo") return View::MLO;
  if (s == "CC" || s == "cc") return View::CC;
  throw input_error("unknown view: '" + s + "'");
}

// One raw per-view image plus the metadata needed to pair and orient it.
struct RawImageRecord {
  std::string image_id;
  Tensor pixels;  // H x W, finite and non-negative, at least 16x16
  Laterality laterality = Laterality::Left;
  View view = View::MLO;
  std::string study_id;
  std::int64_t acquisition_time = 0;  // seconds since epoch, UTC
  bool photometric_inverted = false;  // true <=> white background / black tissue

  void validate() const {
    if (pixels.rank() != 2 || pixels.dim(0) < 16 || pixels.dim(1) < 16)
      throw input_error("record " + image_id + ": pixels must be at least 16x16");
    for (std::int64_t i = 0; i < pixels.numel(); ++i) {
      float v = pixels[i];
      if (!std::isfinite(v) || v < 0.0f)
        throw input_error("record " + image_id + ": non-finite or negative intensity");
    }
  }
};

// The unit of all model I/O: a normalized square intensity grid.
struct CanonicalImage {
  Tensor pixels;  // S x S in [0, 1]
  std::vector<std::string> provenance;

  void validate(int expected_size = 0) const {
    if (pixels.rank() != 2 || pixels.dim(0) != pixels.dim(1))
      throw input_error("canonical image must be square");
    if (expected_size > 0 && pixels.dim(0) != expected_size)
      throw input_error("canonical image is " + pixels.shape_str() + ", expected " +
                        std::to_string(expected_size) + " per side");
    for (std::int64_t i = 0; i < pixels.numel(); ++i)
      if (!(pixels[i] >= 0.0f && pixels[i] <= 1.0f))
        throw input_error("canonical image intensity outside [0,1]");
  }
};

// Parses "YYYY-MM-DD[T ]HH:MM:SS" (optional trailing Z / fraction ignored)
// into UTC seconds. Uses the days-from-civil formula, so no locale or TZ
// state is involved.
inline std::int64_t parse_iso8601(const std::string& s) {
  int y, mo, d, h, mi, se;
  char sep;
  if (std::sscanf(s.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &se) != 7 ||
      (sep != 'T' && sep != ' '))
    throw input_error("bad timestamp: '" + s + "' (expected ISO-8601)");
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || se > 60)
    throw input_error("bad timestamp: '" + s + "'");
  std::int64_t yy = y - (mo <= 2 ? 1 : 0);
  std::int64_t era = (yy >= 0 ? yy : yy - 399) / 400;
  std::int64_t yoe = yy - era * 400;
  std::int64_t doy = (153 * (mo + (mo > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  std::int64_t doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  std::int64_t days = era * 146097 + doe - 719468;
  return days * 86400 + h * 3600 + mi * 60 + se;
}

}  // namespace hand::preprocess
