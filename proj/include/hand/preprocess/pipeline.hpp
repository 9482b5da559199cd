#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "hand/core/image.hpp"
#include "hand/preprocess/records.hpp"

namespace hand::preprocess {

// For each (study, laterality, view) key keeps only the record with the
// latest acquisition time (ties: last occurrence wins). Survivor order
// follows the input.
inline std::vector<RawImageRecord> dedupe_latest(std::vector<RawImageRecord> records) {
  using Key = std::tuple<std::string, Laterality, View>;
  std::map<Key, size_t> best;
  for (size_t i = 0; i < records.size(); ++i) {
    Key key{records[i].study_id, records[i].laterality, records[i].view};
    auto it = best.find(key);
    if (it == best.end() || records[i].acquisition_time >= records[it->second].acquisition_time)
      best[key] = i;
  }
  std::vector<size_t> keep;
  keep.reserve(best.size());
  for (const auto& [key, idx] : best) keep.push_back(idx);
  std::sort(keep.begin(), keep.end());
  std::vector<RawImageRecord> out;
  out.reserve(keep.size());
  for (size_t idx : keep) out.push_back(std::move(records[idx]));
  return out;
}

// Photometric inversion: each pixel p becomes (max - p) and the flag is
// cleared. No-op when the flag is false.
inline RawImageRecord maybe_invert(RawImageRecord record) {
  if (!record.photometric_inverted) return record;
  float mx = record.pixels.max();
  for (std::int64_t i = 0; i < record.pixels.numel(); ++i)
    record.pixels[i] = mx - record.pixels[i];
  record.photometric_inverted = false;
  return record;
}

// Minimal bounding box of pixels strictly above threshold_fraction * max.
// Falls back to the full grid when nothing qualifies.
inline Tensor crop_tissue(const Tensor& image, float threshold_fraction) {
  if (image.rank() != 2 || image.empty()) throw input_error("crop_tissue: empty image");
  float threshold = threshold_fraction * image.max();
  int h = image.dim(0), w = image.dim(1);
  int r0 = h, r1 = -1, c0 = w, c1 = -1;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      if (image.at(i, j) > threshold) {
        r0 = std::min(r0, i);
        r1 = std::max(r1, i);
        c0 = std::min(c0, j);
        c1 = std::max(c1, j);
      }
  if (r1 < 0) return image;
  return crop(image, r0, c0, r1 - r0 + 1, c1 - c0 + 1);
}

// Stitches a left/right view pair back to back: each side is resized to
// size x size/2 (2:1 height:width), the right view fills the left half of
// the composite so the chest walls meet at the center.
inline Tensor stitch_pair(const Tensor& left, const Tensor& right, int size = 256) {
  if (left.empty() || right.empty()) throw input_error("stitch_pair: empty side");
  if (size % 2 != 0) throw input_error("stitch_pair: size must be even");
  Tensor l = resize_bilinear(left, size, size / 2);
  Tensor r = resize_bilinear(right, size, size / 2);
  return hconcat(r, l);
}

// Record-level stitch with pairing validation.
inline Tensor stitch_records(const RawImageRecord& left, const RawImageRecord& right,
                             int size = 256) {
  if (left.view != right.view)
    throw input_error("pairing error: views differ for study " + left.study_id + " (" +
                      to_string(left.view) + " vs " + to_string(right.view) + ")");
  if (left.laterality != Laterality::Left || right.laterality != Laterality::Right)
    throw input_error("pairing error: lateralities mislabeled for study " + left.study_id);
  if (left.study_id != right.study_id)
    throw input_error("pairing error: records belong to different studies");
  return stitch_pair(left.pixels, right.pixels, size);
}

// (p - min) / (max - min); constant input maps to all zeros.
inline CanonicalImage normalize_minmax(const Tensor& image,
                                       std::vector<std::string> provenance = {}) {
  if (image.rank() != 2 || image.empty()) throw input_error("normalize: empty image");
  float lo = image.min(), hi = image.max();
  CanonicalImage out;
  out.pixels = Tensor(image.shape());
  if (hi > lo) {
    float inv = 1.0f / (hi - lo);
    for (std::int64_t i = 0; i < image.numel(); ++i)
      out.pixels[i] = (image[i] - lo) * inv;
  }
  out.provenance = std::move(provenance);
  out.provenance.push_back("normalize_minmax");
  return out;
}

struct PreprocessConfig {
  float crop_threshold = 0.05f;  // fraction of max intensity
  int output_size = 256;
  bool outlier_filter = true;    // drop stitched images outside mean +- 3 sigma
};

struct StitchedItem {
  std::string stitched_id;
  CanonicalImage image;
  std::vector<std::string> source_ids;  // right first, matching layout
};

struct PreprocessResult {
  std::vector<StitchedItem> items;
  std::vector<std::string> skipped;  // human-readable reasons, stable order
};

// Full Appendix-B-style pipeline over in-memory records: dedupe, invert,
// crop, pair per (study, view), stitch, normalize, then the corpus-level
// intensity outlier filter.
inline PreprocessResult run_pipeline(std::vector<RawImageRecord> records,
                                     const PreprocessConfig& cfg = {}) {
  PreprocessResult result;
  for (const auto& r : records) r.validate();
  records = dedupe_latest(std::move(records));

  using Key = std::pair<std::string, View>;
  std::vector<Key> order;
  std::map<Key, std::vector<size_t>> groups;
  for (size_t i = 0; i < records.size(); ++i) {
    Key key{records[i].study_id, records[i].view};
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(i);
  }

  for (const auto& key : order) {
    const auto& idxs = groups[key];
    std::optional<size_t> left, right;
    for (size_t i : idxs) {
      if (records[i].laterality == Laterality::Left) left = i;
      else right = i;
    }
    std::string tag = key.first + "_" + to_string(key.second);
    if (!left || !right) {
      result.skipped.push_back(tag + ": missing " + (left ? "right" : "left") +
                               " view, study dropped");
      continue;
    }
    std::vector<std::string> prov{"dedupe_latest"};
    RawImageRecord l = records[*left];
    RawImageRecord r = records[*right];
    if (l.photometric_inverted) prov.push_back("invert:" + l.image_id);
    if (r.photometric_inverted) prov.push_back("invert:" + r.image_id);
    l = maybe_invert(std::move(l));
    r = maybe_invert(std::move(r));
    Tensor lc = crop_tissue(l.pixels, cfg.crop_threshold);
    Tensor rc = crop_tissue(r.pixels, cfg.crop_threshold);
    prov.push_back("crop_tissue");
    Tensor stitched = stitch_pair(lc, rc, cfg.output_size);
    prov.push_back("stitch_pair:right-left");
    StitchedItem item;
    item.stitched_id = tag;
    item.image = normalize_minmax(stitched, std::move(prov));
    item.source_ids = {r.image_id, l.image_id};
    result.items.push_back(std::move(item));
  }

  if (cfg.outlier_filter && result.items.size() >= 3) {
    std::vector<double> means;
    means.reserve(result.items.size());
    for (const auto& it : result.items) means.push_back(it.image.pixels.mean());
    double mu = 0.0;
    for (double m : means) mu += m;
    mu /= static_cast<double>(means.size());
    double var = 0.0;
    for (double m : means) var += (m - mu) * (m - mu);
    var /= static_cast<double>(means.size());
    double sigma = std::sqrt(var);
    if (sigma > 0.0) {
      std::vector<StitchedItem> kept;
      for (size_t i = 0; i < result.items.size(); ++i) {
        if (std::abs(means[i] - mu) > 3.0 * sigma) {
          result.skipped.push_back(result.items[i].stitched_id +
                                   ": mean intensity outside corpus 3-sigma band");
        } else {
          kept.push_back(std::move(result.items[i]));
        }
      }
      result.items = std::move(kept);
    }
  }
  return result;
}

}  // namespace hand::preprocess
