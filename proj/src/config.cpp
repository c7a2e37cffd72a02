#include "eman/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "eman/csv.hpp"

namespace eman {

std::string_view to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "step"; }

double learning_rate(const OptimConfig& optim, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) return optim.lr;
    const auto warm = static_cast<std::size_t>(std::ceil(optim.warmup_fraction * static_cast<double>(total_steps)));
    if (step < warm) return optim.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    const double progress =
        total_steps > warm ? static_cast<double>(step - warm) / static_cast<double>(total_steps - warm) : 1.0;
    if (optim.schedule == LrSchedule::cosine) return optim.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    double lr = optim.lr;
    if (frac >= 0.6) lr *= 0.1;
    if (frac >= 0.8) lr *= 0.1;
    return lr;
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view v) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= v.size()) {
        const auto comma = v.find(',', start);
        const std::string item = trim(v.substr(start, comma == std::string_view::npos ? v.npos : comma - start));
        if (!item.empty()) out.push_back(item);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

template <typename T>
T parse_int(std::string_view v, std::string_view key) {
    T out{};
    const std::string t = trim(v);
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
        throw ConfigError(fmt::format("{}: '{}' is not a non-negative integer", key, v));
    }
    return out;
}

double parse_real(std::string_view v, std::string_view key) {
    try {
        const double d = parse_double(trim(v));
        if (!std::isfinite(d)) throw std::invalid_argument("non-finite");
        return d;
    } catch (const std::invalid_argument&) {
        throw ConfigError(fmt::format("{}: '{}' is not a finite number", key, v));
    }
}

template <typename F>
auto wrap(std::string_view key, F&& parse) {
    try {
        return parse();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(fmt::format("{}: {}", key, e.what()));
    }
}

template <typename T>
std::string join_numbers(const std::vector<T>& v) {
    std::vector<std::string> parts;
    for (const T& x : v) {
        if constexpr (std::is_floating_point_v<T>) {
            parts.push_back(format_double(x));
        } else {
            parts.push_back(fmt::format("{}", x));
        }
    }
    return fmt::format("{}", fmt::join(parts, ", "));
}

using Setter = std::function<void(ExperimentConfig&, std::string_view, std::string_view)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
    std::string section;
    std::string key;
    Setter set;
    Getter get;
};

#define EMAN_SIZE(sec, name, expr)                                                                              \
    Field {                                                                                                     \
        sec, name, [](ExperimentConfig& c, std::string_view v, std::string_view k) {                            \
            expr = parse_int<std::size_t>(v, k);                                                                \
        },                                                                                                      \
            [](const ExperimentConfig& c) { return fmt::format("{}", expr); }                                   \
    }
#define EMAN_REAL(sec, name, expr)                                                                              \
    Field {                                                                                                     \
        sec, name, [](ExperimentConfig& c, std::string_view v, std::string_view k) { expr = parse_real(v, k); }, \
            [](const ExperimentConfig& c) { return format_double(expr); }                                       \
    }
#define EMAN_TEXT(sec, name, expr)                                                                              \
    Field {                                                                                                     \
        sec, name, [](ExperimentConfig& c, std::string_view v, std::string_view) { expr = trim(v); },           \
            [](const ExperimentConfig& c) { return std::string(expr); }                                         \
    }
#define EMAN_ENUM(sec, name, expr, parser)                                                                      \
    Field {                                                                                                     \
        sec, name, [](ExperimentConfig& c, std::string_view v, std::string_view k) {                            \
            expr = wrap(k, [&] { return parser(trim(v)); });                                                    \
        },                                                                                                      \
            [](const ExperimentConfig& c) { return std::string(to_string(expr)); }                              \
    }

LrSchedule parse_lr_schedule(std::string_view v) {
    if (v == "cosine") return LrSchedule::cosine;
    if (v == "step") return LrSchedule::step;
    throw std::invalid_argument(fmt::format("unknown lr schedule '{}' (expected cosine|step)", v));
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        EMAN_TEXT("experiment", "name", c.name),
        EMAN_ENUM("experiment", "framework", c.framework, parse_framework),
        EMAN_SIZE("experiment", "epochs", c.epochs),
        EMAN_SIZE("experiment", "steps_per_epoch", c.steps_per_epoch),
        EMAN_SIZE("experiment", "batch_size", c.batch_size),
        Field{"experiment", "seeds",
              [](ExperimentConfig& c, std::string_view v, std::string_view k) {
                  c.seeds.clear();
                  for (const std::string& s : split_list(v)) c.seeds.push_back(parse_int<std::uint64_t>(s, k));
              },
              [](const ExperimentConfig& c) { return join_numbers(c.seeds); }},

        Field{"model", "hidden",
              [](ExperimentConfig& c, std::string_view v, std::string_view k) {
                  c.arch.hidden.clear();
                  for (const std::string& s : split_list(v)) c.arch.hidden.push_back(parse_int<std::size_t>(s, k));
              },
              [](const ExperimentConfig& c) { return join_numbers(c.arch.hidden); }},
        EMAN_SIZE("model", "embed_dim", c.embed_dim),
        EMAN_ENUM("model", "norm", c.arch.norm, norm::parse_norm_kind),
        EMAN_SIZE("model", "spatial", c.arch.spatial),
        EMAN_SIZE("model", "groups", c.arch.groups),
        EMAN_SIZE("model", "shard_count", c.arch.shard_count),
        EMAN_REAL("model", "eps", c.arch.eps),
        EMAN_REAL("model", "proxy_alpha", c.arch.alpha),

        EMAN_TEXT("teacher", "norm", c.teacher_norm),
        EMAN_REAL("teacher", "momentum", c.teacher.param_momentum),
        EMAN_REAL("teacher", "buffer_momentum", c.teacher.buffer_momentum),
        EMAN_ENUM("teacher", "schedule", c.teacher.schedule, parse_momentum_schedule),
        EMAN_ENUM("teacher", "variant", c.teacher.variant, parse_stats_variant),
        EMAN_REAL("teacher", "proxy_alpha", c.teacher.proxy_alpha),

        EMAN_REAL("fixmatch", "tau", c.fixmatch.tau),
        EMAN_REAL("fixmatch", "lambda_sup", c.fixmatch.lambda_sup),
        EMAN_REAL("fixmatch", "lambda_unsup", c.fixmatch.lambda_unsup),
        EMAN_SIZE("fixmatch", "labeled_batch", c.fixmatch.labeled_batch),
        EMAN_SIZE("fixmatch", "unlabeled_batch", c.fixmatch.unlabeled_batch),
        EMAN_ENUM("fixmatch", "mode", c.fixmatch.mode, parse_fixmatch_mode),

        EMAN_REAL("mean_teacher", "consistency_weight", c.consistency_weight),
        EMAN_SIZE("moco", "queue", c.moco_queue),
        EMAN_REAL("moco", "temperature", c.moco_temperature),
        EMAN_SIZE("byol", "predictor_hidden", c.predictor_hidden),

        EMAN_ENUM("data", "kind", c.data.synthetic.kind, parse_synthetic_kind),
        EMAN_SIZE("data", "n", c.data.synthetic.n),
        EMAN_SIZE("data", "classes", c.data.synthetic.classes),
        EMAN_SIZE("data", "dim", c.data.synthetic.dim),
        EMAN_REAL("data", "noise", c.data.synthetic.noise),
        EMAN_REAL("data", "separation", c.data.synthetic.separation),
        Field{"data", "seed",
              [](ExperimentConfig& c, std::string_view v, std::string_view k) {
                  c.data.seed = parse_int<std::uint64_t>(v, k);
              },
              [](const ExperimentConfig& c) { return fmt::format("{}", c.data.seed); }},
        EMAN_REAL("data", "val_fraction", c.data.val_fraction),
        EMAN_REAL("data", "label_fraction", c.data.label_fraction),
        EMAN_TEXT("data", "idx_images", c.data.idx_images),
        EMAN_TEXT("data", "idx_labels", c.data.idx_labels),

        EMAN_REAL("optim", "lr", c.optim.lr),
        EMAN_REAL("optim", "momentum", c.optim.momentum),
        EMAN_REAL("optim", "weight_decay", c.optim.weight_decay),
        EMAN_REAL("optim", "warmup_fraction", c.optim.warmup_fraction),
        EMAN_ENUM("optim", "schedule", c.optim.schedule, parse_lr_schedule),

        EMAN_REAL("augment", "weak_jitter", c.augment.weak_jitter),
        EMAN_REAL("augment", "strong_jitter", c.augment.strong_jitter),
        EMAN_REAL("augment", "strong_mask", c.augment.strong_mask),

        EMAN_SIZE("eval", "knn_k", c.eval.knn_k),
        EMAN_SIZE("eval", "top_n", c.eval.top_n),
        EMAN_SIZE("eval", "probe_epochs", c.eval.probe_epochs),
        EMAN_SIZE("eval", "dependency_trials", c.eval.dependency_trials),

        Field{"compare", "pairs",
              [](ExperimentConfig& c, std::string_view v, std::string_view k) {
                  c.compare_pairs.clear();
                  for (const std::string& item : split_list(v)) {
                      const auto colon = item.find(':');
                      if (colon == std::string::npos) {
                          throw ConfigError(fmt::format("{}: '{}' is not student:teacher", k, item));
                      }
                      c.compare_pairs.emplace_back(trim(item.substr(0, colon)), trim(item.substr(colon + 1)));
                  }
              },
              [](const ExperimentConfig& c) {
                  std::vector<std::string> parts;
                  for (const auto& [s, t] : c.compare_pairs) parts.push_back(s + ":" + t);
                  return fmt::format("{}", fmt::join(parts, ", "));
              }},
        Field{"compare", "frameworks",
              [](ExperimentConfig& c, std::string_view v, std::string_view k) {
                  c.compare_frameworks.clear();
                  for (const std::string& item : split_list(v)) {
                      c.compare_frameworks.push_back(wrap(k, [&] { return parse_framework(item); }));
                  }
              },
              [](const ExperimentConfig& c) {
                  std::vector<std::string> parts;
                  for (Framework f : c.compare_frameworks) parts.emplace_back(to_string(f));
                  return fmt::format("{}", fmt::join(parts, ", "));
              }},
        Field{"ablate", "momenta",
              [](ExperimentConfig& c, std::string_view v, std::string_view k) {
                  c.ablate_momenta.clear();
                  for (const std::string& item : split_list(v)) c.ablate_momenta.push_back(parse_real(item, k));
              },
              [](const ExperimentConfig& c) { return join_numbers(c.ablate_momenta); }},
        Field{"ablate", "variants",
              [](ExperimentConfig& c, std::string_view v, std::string_view k) {
                  c.ablate_variants.clear();
                  for (const std::string& item : split_list(v)) {
                      const auto colon = item.find(':');
                      if (colon == std::string::npos) {
                          throw ConfigError(fmt::format("{}: '{}' is not variant:alpha", k, item));
                      }
                      const StatsVariant var = wrap(k, [&] { return parse_stats_variant(trim(item.substr(0, colon))); });
                      c.ablate_variants.emplace_back(var, parse_real(item.substr(colon + 1), k));
                  }
              },
              [](const ExperimentConfig& c) {
                  std::vector<std::string> parts;
                  for (const auto& [v, a] : c.ablate_variants) {
                      parts.push_back(fmt::format("{}:{}", to_string(v), format_double(a)));
                  }
                  return fmt::format("{}", fmt::join(parts, ", "));
              }},
    };
    return table;
}

#undef EMAN_SIZE
#undef EMAN_REAL
#undef EMAN_TEXT
#undef EMAN_ENUM

}  // namespace

void set_config_value(ExperimentConfig& config, std::string_view section, std::string_view key,
                      std::string_view value) {
    for (const Field& f : fields()) {
        if (f.section == section && f.key == key) {
            f.set(config, value, fmt::format("{}.{}", section, key));
            return;
        }
    }
    throw ConfigError(fmt::format("unknown config key '{}.{}'", section, key));
}

ExperimentConfig parse_config(std::string_view text, std::string_view origin) {
    ExperimentConfig config;
    std::set<std::string> sections;
    for (const Field& f : fields()) sections.insert(f.section);
    std::set<std::string> seen;
    std::string section;
    std::istringstream in{std::string(text)};
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        const auto hash = line.find_first_of("#;");
        const std::string t = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (t.empty()) continue;
        const std::string where = fmt::format("{}:{}", origin, lineno);
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError(fmt::format("{}: malformed section header", where));
            section = trim(std::string_view(t).substr(1, t.size() - 2));
            if (!sections.count(section)) throw ConfigError(fmt::format("{}: unknown section [{}]", where, section));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError(fmt::format("{}: expected 'key = value'", where));
        if (section.empty()) throw ConfigError(fmt::format("{}: key outside any section", where));
        const std::string key = trim(std::string_view(t).substr(0, eq));
        if (!seen.insert(section + "." + key).second) {
            throw ConfigError(fmt::format("{}: duplicate key '{}.{}'", where, section, key));
        }
        try {
            set_config_value(config, section, key, std::string_view(t).substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(fmt::format("{}: {}", where, e.what()));
        }
    }
    config.validate();
    return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(fmt::format("cannot open config {}", path.string()));
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str(), path.string());
}

std::string ExperimentConfig::canonical() const {
    std::string out;
    std::string section;
    for (const Field& f : fields()) {
        if (f.section != section) {
            if (!section.empty()) out += '\n';
            section = f.section;
            out += fmt::format("[{}]\n", section);
        }
        out += fmt::format("{} = {}\n", f.key, f.get(*this));
    }
    return out;
}

std::string ExperimentConfig::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return fmt::format("{:016x}", h);
}

ResolvedTeacher resolve_teacher(const ExperimentConfig& c) {
    ResolvedTeacher r{c.teacher, c.fixmatch.mode, c.teacher_norm};
    const norm::NormKind student = c.arch.norm;
    const bool bn_student = is_batch_norm_family(student);
    auto batch_teacher = [&](norm::NormKind kind) {
        r.teacher.variant = StatsVariant::batch_bn;
        r.teacher.batch_kind = kind;
    };
    if (c.teacher_norm == "default") {
        switch (c.framework) {
            case Framework::supervised: r.teacher.variant = StatsVariant::eman; break;
            case Framework::fixmatch:
                r.fixmatch_mode = FixMatchMode::concat;
                r.teacher.variant = StatsVariant::eman;
                break;
            case Framework::mean_teacher:
                if (bn_student) batch_teacher(student);
                break;
            case Framework::moco:
                if (bn_student) batch_teacher(norm::NormKind::shuffle_bn);
                break;
            case Framework::byol:
                if (bn_student) batch_teacher(norm::NormKind::sync_bn);
                break;
        }
        return r;
    }
    if (c.teacher_norm == "EMAN") {
        if (!uses_ema_teacher(c.framework)) {
            throw ConfigError(fmt::format("teacher.norm = EMAN requires an EMA teacher framework, not {}",
                                          to_string(c.framework)));
        }
        if (r.teacher.variant == StatsVariant::batch_bn) {
            throw ConfigError("teacher.norm = EMAN conflicts with teacher.variant = batch_bn");
        }
        r.fixmatch_mode = FixMatchMode::eman_teacher;
        return r;
    }
    norm::NormKind kind{};
    try {
        kind = norm::parse_norm_kind(c.teacher_norm);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(fmt::format("teacher.norm: {} (or EMAN/default)", e.what()));
    }
    if (is_batch_norm_family(kind)) {
        if (!bn_student) {
            throw ConfigError(fmt::format("teacher.norm = {} needs a BN-family student, got {}", c.teacher_norm,
                                          norm::to_string(student)));
        }
        batch_teacher(kind);
    } else if (kind != student) {
        throw ConfigError(fmt::format("teacher.norm = {} must match the per-sample student norm {}", c.teacher_norm,
                                      norm::to_string(student)));
    } else {
        r.teacher.variant = StatsVariant::eman;
    }
    return r;
}

void ExperimentConfig::validate() const {
    auto fail = [](std::string msg) { throw ConfigError(std::move(msg)); };
    if (epochs == 0) fail("experiment.epochs must be >= 1");
    if (steps_per_epoch == 0) fail("experiment.steps_per_epoch must be >= 1");
    if (batch_size < 2) fail("experiment.batch_size must be >= 2");
    if (seeds.empty()) fail("experiment.seeds must list at least one seed");
    if (embed_dim == 0) fail("model.embed_dim must be >= 1");
    if (predictor_hidden == 0) fail("byol.predictor_hidden must be >= 1");
    try {
        Architecture a = arch;
        a.input_dim = a.output_dim = 1;
        a.validate();
    } catch (const std::invalid_argument& e) {
        fail(fmt::format("model: {}", e.what()));
    }
    try {
        teacher.validate();
        fixmatch.validate();
        validate_pair(AugmentationSpec::weak(augment.weak_jitter),
                      AugmentationSpec::strong(augment.strong_jitter, augment.strong_mask));
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        fail(e.what());
    }
    if (!(consistency_weight >= 0.0)) fail("mean_teacher.consistency_weight must be >= 0");
    if (moco_queue == 0) fail("moco.queue must be >= 1");
    if (!(moco_temperature > 0.0)) fail("moco.temperature must be > 0");
    if (!(optim.lr > 0.0)) fail("optim.lr must be > 0");
    if (!(optim.momentum >= 0.0 && optim.momentum < 1.0)) fail("optim.momentum must lie in [0, 1)");
    if (!(optim.weight_decay >= 0.0)) fail("optim.weight_decay must be >= 0");
    if (!(optim.warmup_fraction >= 0.0 && optim.warmup_fraction < 1.0)) fail("optim.warmup_fraction must lie in [0, 1)");
    if (!(data.val_fraction > 0.0 && data.val_fraction < 1.0)) fail("data.val_fraction must lie in (0, 1)");
    if (!(data.label_fraction > 0.0 && data.label_fraction <= 1.0)) fail("data.label_fraction must lie in (0, 1]");
    if (data.idx_images.empty() != data.idx_labels.empty()) fail("data.idx_images and data.idx_labels go together");
    if (data.idx_images.empty()) {
        if (data.synthetic.n < 2 * data.synthetic.classes) fail("data.n must be >= 2 * data.classes");
        if (data.synthetic.dim == 0) fail("data.dim must be >= 1");
        if (!(data.synthetic.noise >= 0.0)) fail("data.noise must be >= 0");
    }
    if (eval.knn_k == 0 || eval.top_n == 0) fail("eval.knn_k and eval.top_n must be >= 1");
    for (double m : ablate_momenta) {
        if (!(m >= 0.0 && m <= 1.0)) fail(fmt::format("ablate.momenta: {} outside [0, 1]", m));
    }
    for (const auto& [v, a] : ablate_variants) {
        if (v != StatsVariant::teacher_pn && v != StatsVariant::student_pn) {
            fail(fmt::format("ablate.variants: {} is not a proxy-norm variant", to_string(v)));
        }
        if (!(a >= 0.0 && a < 1.0)) fail(fmt::format("ablate.variants: alpha {} outside [0, 1)", a));
    }

    const ResolvedTeacher rt = resolve_teacher(*this);
    const auto sharded = [](std::optional<norm::NormKind> k) {
        return k && (*k == norm::NormKind::sync_bn || *k == norm::NormKind::shuffle_bn);
    };
    if (sharded(arch.norm) || sharded(rt.teacher.batch_kind)) {
        std::vector<std::size_t> sizes;
        switch (framework) {
            case Framework::supervised:
            case Framework::moco:
            case Framework::byol: sizes = {batch_size}; break;
            case Framework::mean_teacher: sizes = {fixmatch.labeled_batch, fixmatch.unlabeled_batch}; break;
            case Framework::fixmatch:
                sizes = {fixmatch.labeled_batch + fixmatch.unlabeled_batch *
                                                      (rt.fixmatch_mode == FixMatchMode::concat ? 2 : 1),
                         fixmatch.unlabeled_batch};
                break;
        }
        for (std::size_t s : sizes) {
            if (s % arch.shard_count != 0) {
                fail(fmt::format("batch of {} does not split into model.shard_count = {} shards", s, arch.shard_count));
            }
        }
    }
}

}  // namespace eman
