#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "eman/rng.hpp"
#include "eman/tensor.hpp"

namespace eman {

struct Batch {
    Tensor x;
    std::vector<int> y;
};

/// Two augmentations of the same rows.
struct ViewPair {
    Tensor a;
    Tensor b;
};

struct Dataset {
    Tensor x;  // [N, d]
    std::vector<int> y;
    std::size_t classes = 0;
    std::string split = "train";

    std::size_t size() const { return y.size(); }
    std::size_t dim() const { return x.rank() == 2 ? x.extent(1) : 0; }
    std::vector<std::size_t> class_counts() const;
    Dataset subset(std::span<const std::size_t> indices) const;
    Batch batch(std::span<const std::size_t> indices) const;
    /// Throws when labels leave [0, classes) or shapes disagree.
    void validate() const;
};

enum class SyntheticKind { two_moons, blobs };

std::string_view to_string(SyntheticKind kind);
SyntheticKind parse_synthetic_kind(std::string_view name);

struct SyntheticSpec {
    SyntheticKind kind = SyntheticKind::blobs;
    std::size_t n = 1000;
    std::size_t classes = 2;
    std::size_t dim = 2;
    double noise = 0.1;
    /// Standard deviation of the blob centers.
    double separation = 1.0;
};

/// Balanced classes (counts differ by at most one), rows in shuffled order.
/// Centers come from their own stream, so datasets drawn with the same seed
/// and different `n` share the same class geometry.
Dataset make_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

struct TrainVal {
    Dataset train;
    Dataset val;
};

/// Stratified split; `val_fraction` of each class goes to val.
TrainVal split_train_val(const Dataset& ds, double val_fraction, std::uint64_t seed);

struct SplitSpec {
    double label_fraction = 0.1;
    bool per_class = true;
    std::uint64_t seed = 0;
};

struct LabelSplit {
    std::vector<std::size_t> labeled;
    std::vector<std::size_t> unlabeled;
};

/// Draw floor(fraction * count) labeled rows per class without replacement.
/// Index lists are sorted.
LabelSplit subsample_labels(const Dataset& ds, const SplitSpec& spec);

enum class AugmentStrength { weak, strong };

struct AugmentationSpec {
    AugmentStrength strength = AugmentStrength::weak;
    double jitter = 0.1;
    double mask_fraction = 0.0;

    static AugmentationSpec weak(double jitter = 0.1) { return {AugmentStrength::weak, jitter, 0.0}; }
    static AugmentationSpec strong(double jitter = 0.3, double mask = 0.3) {
        return {AugmentStrength::strong, jitter, mask};
    }
    void validate() const;
};

/// Weak and strong specs must satisfy weak.jitter < strong.jitter and weak.mask = 0.
void validate_pair(const AugmentationSpec& weak, const AugmentationSpec& strong);

/// x + N(0, jitter^2), then exactly floor(mask_fraction * d) coordinates per
/// row set to zero.
Tensor augment(const Tensor& x, const AugmentationSpec& spec, Rng& rng);

// IDX codec: magic (0x00 0x00 type rank), big-endian u32 extents, raw payload.

enum class IdxType : std::uint8_t {
    u8 = 0x08,
    i8 = 0x09,
    i16 = 0x0B,
    i32 = 0x0C,
    f32 = 0x0D,
    f64 = 0x0E,
};

struct IdxArray {
    IdxType type = IdxType::u8;
    std::vector<std::uint32_t> dims;
    std::vector<double> values;
};

class IdxError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

IdxArray read_idx(const std::filesystem::path& path);
IdxArray parse_idx(std::span<const std::uint8_t> bytes, std::string_view what = "idx");
void write_idx(const std::filesystem::path& path, const IdxArray& array);
std::vector<std::uint8_t> encode_idx(const IdxArray& array);

/// Images [N, ...] flattened to [N, d]; u8 pixels scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

// Line-based key-value manifests: "key = value", '#' comments.

using Manifest = std::vector<std::pair<std::string, std::string>>;

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

}  // namespace eman
