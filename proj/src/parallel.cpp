#include "ember/parallel.hpp"

#include <charconv>
#include <cstdlib>
#include <cstring>

namespace ember {

unsigned default_jobs() noexcept {
    if (const char* env = std::getenv("EMBER_JOBS")) {
        unsigned value = 0;
        const auto* end = env + std::strlen(env);
        auto [ptr, ec] = std::from_chars(env, end, value);
        if (ec == std::errc{} && ptr == end && value > 0) return value;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace ember
