#include "eman/simd/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace eman::simd {
namespace {

bool cpu_has_avx2() {
#if defined(EMAN_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

const KernelTable* select_initial() {
    Level level = supported(Level::avx2) ? Level::avx2 : Level::scalar;
    if (const char* env = std::getenv("EMAN_SIMD"); env != nullptr && std::string(env) != "auto") {
        level = parse_level(env);
    }
    return &kernels_for(level);
}

std::atomic<const KernelTable*>& active() {
    static std::atomic<const KernelTable*> table{select_initial()};
    return table;
}

}  // namespace

bool supported(Level level) {
    switch (level) {
        case Level::scalar:
            return true;
        case Level::avx2:
            return cpu_has_avx2();
    }
    return false;
}

const KernelTable& kernels_for(Level level) {
    if (!supported(level)) {
        throw std::invalid_argument("simd level '" + std::string(to_string(level)) + "' is not supported on this host");
    }
    switch (level) {
        case Level::scalar:
            return detail::scalar_table();
        case Level::avx2:
#if defined(EMAN_HAVE_AVX2)
            return detail::avx2_table();
#else
            break;
#endif
    }
    return detail::scalar_table();
}

const KernelTable& kernels() { return *active().load(std::memory_order_acquire); }

void set_level(Level level) { active().store(&kernels_for(level), std::memory_order_release); }

Level active_level() { return kernels().level; }

std::string_view to_string(Level level) {
    switch (level) {
        case Level::scalar:
            return "scalar";
        case Level::avx2:
            return "avx2";
    }
    return "unknown";
}

Level parse_level(std::string_view name) {
    if (name == "scalar") return Level::scalar;
    if (name == "avx2") return Level::avx2;
    throw std::invalid_argument("unknown simd level '" + std::string(name) + "' (expected scalar|avx2|auto)");
}

}  // namespace eman::simd
