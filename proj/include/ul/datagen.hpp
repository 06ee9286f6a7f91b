#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ul/config.hpp"
#include "ul/tensor.hpp"

namespace ul {

// Seeded synthetic image corpora with controllable information content, plus
// folder ingestion. Every sample is fully determined by (spec, index): blobs
// carry little information (one of a few jittered centers), checkerboards a
// medium amount (frequency + phase), sprites the most (a grid of glyphs).
struct DatasetSpec {
    enum class Family { Blobs, Checkerboards, Sprites, Folder };

    Family family = Family::Blobs;
    int resolution = 16;
    int channels = 1;
    int64_t size = 0;
    uint64_t seed = 0;

    // blobs
    int mode_count = 8;
    double blob_radius = 0.6;
    double blob_jitter = 0.05;
    double blob_width = 0.25;
    // checkerboards
    int freq_min = 2;
    int freq_max = 5;
    // sprites
    int glyph_cell = 4;       // pixels per glyph cell edge
    int glyph_alphabet = 16;  // distinct glyph patterns
    // folder
    std::string folder;

    void validate() const;
};

struct SkipRecord {
    std::string path;
    std::string reason;
};

class Dataset {
  public:
    Dataset() = default;

    int64_t size() const;
    // Sample k in [-1,1], shape [H,W,C]; depends only on (spec.seed, k).
    Tensor sample(int64_t k) const;
    Tensor batch(const std::vector<int64_t>& indices) const;  // [N,H,W,C]
    const DatasetSpec& spec() const { return spec_; }
    const std::vector<SkipRecord>& skipped() const { return skipped_; }

    // Ground truth for the blobs family: which mode sample k was drawn from,
    // and the mode a rendered image is nearest to.
    int blob_mode_of(int64_t k) const;
    int nearest_blob_mode(const Tensor& image) const;

    static Dataset from_tensors(std::vector<Tensor> samples);

    friend Dataset generate(const DatasetSpec& spec);
    friend Dataset ingest_folder(const std::string& path, int resolution, int channels);

  private:
    DatasetSpec spec_;
    bool lazy_ = false;
    std::vector<Tensor> materialized_;
    std::vector<SkipRecord> skipped_;
};

Dataset generate(const DatasetSpec& spec);
Dataset ingest_folder(const std::string& path, int resolution, int channels);

// Flat-config form under the "data." prefix, so a run directory's config file
// carries everything needed to rebuild its dataset. Absent keys mean defaults;
// from-then-to is the identity.
DatasetSpec dataset_spec_from(const ConfigMap& m);
void dataset_spec_to(const DatasetSpec& spec, ConfigMap& m);

// Disjoint, seed-stable train/eval index split (eval_frac of n rounded down).
struct SplitIndices {
    std::vector<int64_t> train;
    std::vector<int64_t> eval;
};
SplitIndices split_indices(int64_t n, double eval_frac, uint64_t seed);

// Deterministic batch for a training step: global sample position step*batch+i
// walked through per-epoch shuffles, so the result depends only on (seed, step).
std::vector<int64_t> batch_indices(int64_t step, int64_t batch, int64_t dataset_size,
                                   uint64_t seed);

}  // namespace ul
