#include "eman/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

namespace eman {

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (int label : y) ++counts.at(static_cast<std::size_t>(label));
    return counts;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    const std::size_t d = dim();
    std::vector<double> data;
    data.reserve(indices.size() * d);
    std::vector<int> labels;
    labels.reserve(indices.size());
    for (std::size_t i : indices) {
        if (i >= size()) throw std::out_of_range(fmt::format("dataset index {} >= {}", i, size()));
        data.insert(data.end(), x.raw() + i * d, x.raw() + (i + 1) * d);
        labels.push_back(y[i]);
    }
    return Dataset{Tensor({indices.size(), d}, std::move(data)), std::move(labels), classes, split};
}

Batch Dataset::batch(std::span<const std::size_t> indices) const {
    Dataset s = subset(indices);
    return Batch{std::move(s.x), std::move(s.y)};
}

void Dataset::validate() const {
    if (x.rank() != 2 || x.extent(0) != y.size()) {
        throw ShapeError(fmt::format("dataset: inputs {} for {} labels", to_string(x.shape()), y.size()));
    }
    for (int label : y) {
        if (label < 0 || static_cast<std::size_t>(label) >= classes) {
            throw std::invalid_argument(fmt::format("dataset: label {} outside [0, {})", label, classes));
        }
    }
    for (double v : x.data()) {
        if (!std::isfinite(v)) throw std::invalid_argument("dataset: non-finite input value");
    }
}

std::string_view to_string(SyntheticKind kind) { return kind == SyntheticKind::blobs ? "blobs" : "two_moons"; }

SyntheticKind parse_synthetic_kind(std::string_view name) {
    if (name == "blobs") return SyntheticKind::blobs;
    if (name == "two_moons") return SyntheticKind::two_moons;
    throw std::invalid_argument(fmt::format("unknown dataset kind '{}' (expected blobs|two_moons)", name));
}

Dataset make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.classes < 2) throw std::invalid_argument("make_synthetic: need at least 2 classes");
    if (spec.n < 2 * spec.classes) {
        throw std::invalid_argument(fmt::format("make_synthetic: n = {} < 2 * classes = {}", spec.n, 2 * spec.classes));
    }
    if (spec.kind == SyntheticKind::two_moons && (spec.classes != 2 || spec.dim < 2)) {
        throw std::invalid_argument("make_synthetic: two_moons has 2 classes and dim >= 2");
    }
    if (spec.dim == 0 || !(spec.noise >= 0.0)) throw std::invalid_argument("make_synthetic: bad dim or noise");

    Rng root(seed);
    Rng geometry = root.split(1);
    Rng sampler = root.split(2);
    Rng order = root.split(3);

    const std::size_t d = spec.dim;
    std::vector<double> centers(spec.classes * d);
    for (double& c : centers) c = geometry.normal(0.0, spec.separation);

    std::vector<double> data(spec.n * d);
    std::vector<int> labels(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
        const std::size_t c = i % spec.classes;
        labels[i] = static_cast<int>(c);
        double* row = data.data() + i * d;
        if (spec.kind == SyntheticKind::blobs) {
            for (std::size_t j = 0; j < d; ++j) row[j] = centers[c * d + j] + spec.noise * sampler.normal();
        } else {
            const double t = std::numbers::pi * sampler.uniform();
            row[0] = c == 0 ? std::cos(t) : 1.0 - std::cos(t);
            row[1] = c == 0 ? std::sin(t) : 0.5 - std::sin(t);
            for (std::size_t j = 0; j < d; ++j) row[j] += spec.noise * sampler.normal();
        }
    }
    const std::vector<std::size_t> perm = order.permutation(spec.n);
    Dataset unordered{Tensor({spec.n, d}, std::move(data)), std::move(labels), spec.classes, "train"};
    return unordered.subset(perm);
}

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& ds) {
    std::vector<std::vector<std::size_t>> by(ds.classes);
    for (std::size_t i = 0; i < ds.size(); ++i) by.at(static_cast<std::size_t>(ds.y[i])).push_back(i);
    return by;
}

}  // namespace

TrainVal split_train_val(const Dataset& ds, double val_fraction, std::uint64_t seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
        throw std::invalid_argument(fmt::format("split_train_val: fraction {} outside (0, 1)", val_fraction));
    }
    Rng rng(seed);
    std::vector<std::size_t> train, val;
    for (std::vector<std::size_t>& members : indices_by_class(ds)) {
        rng.shuffle(std::span<std::size_t>(members));
        const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(members.size())));
        val.insert(val.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
        train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    TrainVal out{ds.subset(train), ds.subset(val)};
    out.val.split = "val";
    return out;
}

LabelSplit subsample_labels(const Dataset& ds, const SplitSpec& spec) {
    if (!(spec.label_fraction > 0.0 && spec.label_fraction <= 1.0)) {
        throw std::invalid_argument(fmt::format("subsample_labels: fraction {} outside (0, 1]", spec.label_fraction));
    }
    Rng rng(spec.seed);
    std::vector<bool> chosen(ds.size(), false);
    auto draw = [&](std::vector<std::size_t> pool, std::string_view what) {
        const auto take = static_cast<std::size_t>(std::floor(spec.label_fraction * static_cast<double>(pool.size())));
        if (take == 0) {
            throw std::invalid_argument(fmt::format("subsample_labels: fraction {} leaves no labeled sample in {}",
                                                    spec.label_fraction, what));
        }
        rng.shuffle(std::span<std::size_t>(pool));
        for (std::size_t i = 0; i < take; ++i) chosen[pool[i]] = true;
    };
    if (spec.per_class) {
        const auto by = indices_by_class(ds);
        for (std::size_t c = 0; c < by.size(); ++c) draw(by[c], fmt::format("class {}", c));
    } else {
        std::vector<std::size_t> all(ds.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        draw(std::move(all), "the dataset");
    }
    LabelSplit out;
    for (std::size_t i = 0; i < ds.size(); ++i) (chosen[i] ? out.labeled : out.unlabeled).push_back(i);
    return out;
}

void AugmentationSpec::validate() const {
    if (!(jitter >= 0.0)) throw std::invalid_argument("augmentation: jitter must be >= 0");
    if (!(mask_fraction >= 0.0 && mask_fraction < 1.0)) {
        throw std::invalid_argument(fmt::format("augmentation: mask fraction {} outside [0, 1)", mask_fraction));
    }
}

void validate_pair(const AugmentationSpec& weak, const AugmentationSpec& strong) {
    weak.validate();
    strong.validate();
    if (weak.mask_fraction != 0.0) throw std::invalid_argument("augmentation: weak views are never masked");
    if (!(weak.jitter < strong.jitter)) {
        throw std::invalid_argument(
            fmt::format("augmentation: weak jitter {} must be below strong jitter {}", weak.jitter, strong.jitter));
    }
}

Tensor augment(const Tensor& x, const AugmentationSpec& spec, Rng& rng) {
    spec.validate();
    if (x.rank() != 2) throw ShapeError(fmt::format("augment: expected [n, d], got {}", to_string(x.shape())));
    const std::size_t n = x.extent(0), d = x.extent(1);
    std::vector<double> out = x.to_vector();
    if (spec.jitter > 0.0) {
        for (double& v : out) v += spec.jitter * rng.normal();
    }
    const auto masked = static_cast<std::size_t>(std::floor(spec.mask_fraction * static_cast<double>(d)));
    if (masked > 0) {
        std::vector<std::size_t> coords(d);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) coords[j] = j;
            // Partial Fisher-Yates: the first `masked` slots are a uniform draw.
            for (std::size_t j = 0; j < masked; ++j) std::swap(coords[j], coords[j + rng.index(d - j)]);
            for (std::size_t j = 0; j < masked; ++j) out[i * d + coords[j]] = 0.0;
        }
    }
    return Tensor(x.shape(), std::move(out));
}

namespace {

std::size_t idx_width(IdxType t) {
    switch (t) {
        case IdxType::u8:
        case IdxType::i8: return 1;
        case IdxType::i16: return 2;
        case IdxType::i32:
        case IdxType::f32: return 4;
        case IdxType::f64: return 8;
    }
    return 0;
}

std::uint64_t read_be(const std::uint8_t* p, std::size_t width) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v = (v << 8) | p[i];
    return v;
}

void write_be(std::vector<std::uint8_t>& out, std::uint64_t v, std::size_t width) {
    for (std::size_t i = width; i-- > 0;) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

double decode(IdxType t, std::uint64_t raw) {
    switch (t) {
        case IdxType::u8: return static_cast<double>(raw);
        case IdxType::i8: return static_cast<double>(static_cast<std::int8_t>(raw));
        case IdxType::i16: return static_cast<double>(static_cast<std::int16_t>(raw));
        case IdxType::i32: return static_cast<double>(static_cast<std::int32_t>(raw));
        case IdxType::f32: return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(raw)));
        case IdxType::f64: return std::bit_cast<double>(raw);
    }
    return 0.0;
}

std::uint64_t encode(IdxType t, double v) {
    auto integral = [&](double lo, double hi) {
        if (v != std::floor(v) || v < lo || v > hi) {
            throw IdxError(fmt::format("idx: value {} not representable as type 0x{:02X}", v, static_cast<int>(t)));
        }
        return static_cast<std::int64_t>(v);
    };
    switch (t) {
        case IdxType::u8: return static_cast<std::uint64_t>(integral(0, 255));
        case IdxType::i8: return static_cast<std::uint8_t>(integral(-128, 127));
        case IdxType::i16: return static_cast<std::uint16_t>(integral(-32768, 32767));
        case IdxType::i32: return static_cast<std::uint32_t>(integral(-2147483648.0, 2147483647.0));
        case IdxType::f32: return std::bit_cast<std::uint32_t>(static_cast<float>(v));
        case IdxType::f64: return std::bit_cast<std::uint64_t>(v);
    }
    return 0;
}

}  // namespace

IdxArray parse_idx(std::span<const std::uint8_t> bytes, std::string_view what) {
    if (bytes.size() < 4) throw IdxError(fmt::format("{}: truncated header", what));
    if (bytes[0] != 0 || bytes[1] != 0) throw IdxError(fmt::format("{}: bad magic", what));
    const auto type = static_cast<IdxType>(bytes[2]);
    if (idx_width(type) == 0) throw IdxError(fmt::format("{}: unknown element type 0x{:02X}", what, bytes[2]));
    const std::size_t rank = bytes[3];
    if (rank == 0) throw IdxError(fmt::format("{}: rank 0", what));
    if (bytes.size() < 4 + 4 * rank) throw IdxError(fmt::format("{}: truncated dimension list", what));
    IdxArray out;
    out.type = type;
    std::size_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        out.dims.push_back(static_cast<std::uint32_t>(read_be(bytes.data() + 4 + 4 * i, 4)));
        count *= out.dims.back();
    }
    const std::size_t width = idx_width(type);
    const std::size_t offset = 4 + 4 * rank;
    if (bytes.size() < offset + count * width) {
        throw IdxError(fmt::format("{}: truncated payload ({} of {} bytes)", what, bytes.size() - offset, count * width));
    }
    if (bytes.size() > offset + count * width) throw IdxError(fmt::format("{}: trailing bytes", what));
    out.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) out.values[i] = decode(type, read_be(bytes.data() + offset + i * width, width));
    return out;
}

IdxArray read_idx(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IdxError(fmt::format("cannot open {}", path.string()));
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_idx(bytes, path.string());
}

std::vector<std::uint8_t> encode_idx(const IdxArray& array) {
    const std::size_t width = idx_width(array.type);
    if (width == 0) throw IdxError("idx: unknown element type");
    if (array.dims.empty() || array.dims.size() > 255) throw IdxError("idx: rank must be in [1, 255]");
    std::size_t count = 1;
    for (std::uint32_t d : array.dims) count *= d;
    if (count != array.values.size()) {
        throw IdxError(fmt::format("idx: {} values for {} elements", array.values.size(), count));
    }
    std::vector<std::uint8_t> out{0, 0, static_cast<std::uint8_t>(array.type),
                                  static_cast<std::uint8_t>(array.dims.size())};
    for (std::uint32_t d : array.dims) write_be(out, d, 4);
    for (double v : array.values) write_be(out, encode(array.type, v), width);
    return out;
}

void write_idx(const std::filesystem::path& path, const IdxArray& array) {
    const std::vector<std::uint8_t> bytes = encode_idx(array);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IdxError(fmt::format("cannot open {} for writing", path.string()));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IdxError(fmt::format("write to {} failed", path.string()));
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const IdxArray img = read_idx(images);
    const IdxArray lab = read_idx(labels);
    if (lab.dims.size() != 1) throw IdxError(fmt::format("{}: labels must be rank 1", labels.string()));
    const std::size_t n = img.dims[0];
    if (lab.dims[0] != n) {
        throw IdxError(fmt::format("{} images but {} labels", n, lab.dims[0]));
    }
    const std::size_t d = n == 0 ? 0 : img.values.size() / n;
    std::vector<double> x = img.values;
    if (img.type == IdxType::u8) {
        for (double& v : x) v /= 255.0;
    }
    std::vector<int> y(n);
    int max_label = -1;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = lab.values[i];
        if (v < 0 || v != std::floor(v)) throw IdxError(fmt::format("label {} is not a class index", v));
        y[i] = static_cast<int>(v);
        max_label = std::max(max_label, y[i]);
    }
    Dataset ds{Tensor({n, d}, std::move(x)), std::move(y), static_cast<std::size_t>(max_label + 1), "train"};
    return ds;
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

}  // namespace

Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(fmt::format("cannot open manifest {}", path.string()));
    Manifest out;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error(fmt::format("{}:{}: expected 'key = value'", path.string(), lineno));
        }
        out.emplace_back(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
    }
    return out;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot open {} for writing", path.string()));
    for (const auto& [k, v] : manifest) {
        if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos || v.find('\n') != std::string::npos) {
            throw std::invalid_argument(fmt::format("manifest entry '{}' cannot be encoded", k));
        }
        out << k << " = " << v << '\n';
    }
}

}  // namespace eman
