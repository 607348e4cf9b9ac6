#pragma once

/// Dataset ingestion: annotation CSV + image discovery, the image-level
/// 7:1:2 split, the synthetic blob corpus used at desk scale, and manifest
/// serialization.

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mitodet/annotation.hpp"

namespace mitodet::io {

enum class Split { kTrain, kVal, kTest };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct ImageInfo {
    std::string id;
    std::string path;
    std::int64_t width = 0;
    std::int64_t height = 0;
};

struct DatasetManifest {
    std::vector<ImageInfo> images;                // sorted by id
    std::vector<Annotation> annotations;
    std::map<std::string, Split> splits;          // image id -> split

    const ImageInfo* find_image(const std::string& id) const;
    std::vector<Annotation> annotations_for(const std::string& id) const;
    std::vector<std::string> image_ids(std::optional<Split> split = {}) const;
};

struct LoadIssue {
    int line = 0;  // 0 when not tied to a CSV line
    std::string message;
};

struct LoadResult {
    DatasetManifest manifest;
    std::vector<LoadIssue> issues;  // malformed / out-of-bounds / duplicate rows
};

/// Loads `image_id,cx,cy,label` rows and discovers every PNG under
/// `images_root` (file stem = image id). Rows referencing missing images
/// throw; malformed or out-of-bounds rows are skipped and reported; exact
/// duplicate rows are deduplicated with a warning issue.
LoadResult load_manifest(const std::string& annotation_csv,
                         const std::string& images_root);

/// Writes/reads the manifest as JSON (`images[]`, `annotations[]`, `splits{}`).
void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest_json(const std::string& path);

void save_annotation_csv(const std::vector<Annotation>& anns,
                         const std::string& path);

/// Deterministic image-level split, stratified by annotation-count tercile,
/// with split sizes hitting the global 7:1:2 targets exactly (largest
/// remainder) and each stratum within one image of its proportional share.
void assign_splits(DatasetManifest& m, std::uint64_t seed, double train = 0.7,
                   double val = 0.1, double test = 0.2);

struct SyntheticSpec {
    std::int64_t n_images = 20;
    std::int64_t size = 1024;
    std::int64_t blobs_per_image = 15;
    std::int64_t distractors_per_image = 10;
    std::uint64_t seed = 0;
};

struct SyntheticDataset {
    std::vector<ImageInfo> images;          // paths empty until written
    std::vector<torch::Tensor> pixels;      // (3,H,W) float in [0,1]
    std::vector<Annotation> annotations;    // blob centers
    std::vector<std::string> warnings;      // e.g. fewer blobs than requested
};

/// Renders a deterministic corpus of textured background images with planted
/// dark blobs (positives, diameter U[10,30] px) and ring / smear distractors
/// (hard negatives). Blob centers stay >= 15 px from the borders.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

/// Writes PNGs + annotations.csv + manifest.json under `out_dir` and returns
/// the manifest (without split assignment).
DatasetManifest write_synthetic(const SyntheticDataset& data,
                                const std::string& out_dir);

}  // namespace mitodet::io
