#include "eman/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <fmt/format.h>

namespace eman {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

constexpr char kMagic[4] = {'E', 'M', 'C', 'K'};

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("checkpoint truncated reading " + what);
    return v;
}

}  // namespace

void write_records(const std::filesystem::path& path, const std::vector<CheckpointRecord>& records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(fmt::format("cannot open {} for writing", path.string()));
    out.write(kMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, records.size());
    for (const CheckpointRecord& r : records) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
        out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(r.value.rank()));
        for (std::size_t e : r.value.shape()) put<std::uint64_t>(out, e);
        out.write(reinterpret_cast<const char*>(r.value.raw()), static_cast<std::streamsize>(r.value.size() * 8));
    }
    if (!out) throw CheckpointError(fmt::format("write to {} failed", path.string()));
}

std::vector<CheckpointRecord> read_records(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(fmt::format("cannot open {}", path.string()));
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw CheckpointError(fmt::format("{}: bad checkpoint magic", path.string()));
    }
    const auto version = get<std::uint32_t>(in, "version");
    if (version != kCheckpointVersion) {
        throw CheckpointError(fmt::format("{}: unsupported checkpoint version {}", path.string(), version));
    }
    const auto count = get<std::uint64_t>(in, "record count");
    std::vector<CheckpointRecord> records;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = get<std::uint32_t>(in, "name length");
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw CheckpointError("checkpoint truncated reading name");
        const auto rank = get<std::uint32_t>(in, "rank");
        if (rank == 0 || rank > 8) throw CheckpointError(fmt::format("checkpoint record {}: rank {}", name, rank));
        Shape shape(rank);
        for (auto& e : shape) e = get<std::uint64_t>(in, "extent");
        std::vector<double> data(numel(shape));
        if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 8))) {
            throw CheckpointError(fmt::format("checkpoint truncated in payload of {}", name));
        }
        records.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw CheckpointError(fmt::format("{}: trailing bytes after {} records", path.string(), count));
    }
    return records;
}

std::vector<CheckpointRecord> to_records(const ModelState& model) {
    std::vector<CheckpointRecord> records;
    for (const Parameter& p : model.params()) records.push_back({"param." + p.name, p.value});
    for (const Buffer& b : model.buffers()) {
        const std::size_t c = b.stats.channels();
        records.push_back({"buffer." + b.name + ".mu", Tensor({c}, b.stats.mu)});
        records.push_back({"buffer." + b.name + ".sigma2", Tensor({c}, b.stats.sigma2)});
    }
    return records;
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& model) {
    write_records(path, to_records(model));
}

void load_checkpoint(const std::filesystem::path& path, ModelState& model) {
    std::map<std::string, Tensor> by_name;
    for (CheckpointRecord& r : read_records(path)) {
        if (!by_name.emplace(r.name, r.value).second) throw CheckpointError("duplicate checkpoint record " + r.name);
    }
    const std::vector<CheckpointRecord> expected = to_records(model);
    if (by_name.size() != expected.size()) {
        throw CheckpointError(
            fmt::format("{}: {} records, model expects {}", path.string(), by_name.size(), expected.size()));
    }
    auto fetch = [&](const std::string& name, const Shape& shape) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw CheckpointError(fmt::format("{}: missing record {}", path.string(), name));
        if (it->second.shape() != shape) {
            throw CheckpointError(fmt::format("{}: record {} has shape {}, expected {}", path.string(), name,
                                              to_string(it->second.shape()), to_string(shape)));
        }
        return it->second;
    };
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        const Parameter& p = model.params()[i];
        model.set_param(i, fetch("param." + p.name, p.value.shape()));
    }
    for (std::size_t i = 0; i < model.buffers().size(); ++i) {
        const Buffer& b = model.buffers()[i];
        const Shape s{b.stats.channels()};
        norm::NormStats stats{fetch("buffer." + b.name + ".mu", s).to_vector(),
                              fetch("buffer." + b.name + ".sigma2", s).to_vector(), b.stats.flavor};
        model.set_buffer(i, std::move(stats));
    }
}

}  // namespace eman
