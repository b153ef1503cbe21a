// Fixed-width model features from raw feature records, via the feature
// hashing trick.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ember/raw_features.hpp"

namespace ember {

inline constexpr std::size_t kFeatureDim = 2351;

struct FeatureVector {
    std::array<float, kFeatureDim> values{};

    std::span<const float> view() const noexcept { return values; }
    bool operator==(const FeatureVector&) const = default;
};

/// One contiguous block of the feature vector.
struct Block {
    std::string_view name;
    std::size_t start;
    std::size_t length;
};

namespace layout {
inline constexpr std::size_t kGeneral = 10;
inline constexpr std::size_t kHeader = 62;
inline constexpr std::size_t kImports = 1280;
inline constexpr std::size_t kExports = 128;
inline constexpr std::size_t kSections = 255;
inline constexpr std::size_t kHistogram = 256;
inline constexpr std::size_t kByteEntropy = 256;
inline constexpr std::size_t kStrings = 104;

inline constexpr std::size_t kHeaderStringBins = 10;
inline constexpr std::size_t kLibraryBins = 256;
inline constexpr std::size_t kFunctionBins = 1024;
inline constexpr std::size_t kExportBins = 128;
inline constexpr std::size_t kSectionBins = 50;
}  // namespace layout

/// Group blocks in vector order; lengths sum to kFeatureDim.
std::span<const Block> feature_layout() noexcept;

/// Layout as a JSON object: {"general": [start, length], ...}.
std::string layout_manifest_json();

/// MurmurHash3, x86 32-bit variant.
std::uint32_t murmur3_32(std::span<const std::uint8_t> data, std::uint32_t seed) noexcept;
std::uint32_t murmur3_32(std::string_view data, std::uint32_t seed) noexcept;

using WeightedToken = std::pair<std::string, double>;

/// Signed feature hashing into `bins` buckets. Throws std::invalid_argument
/// when bins == 0.
std::vector<double> hash_pairs(std::span<const WeightedToken> pairs, std::size_t bins);

/// Accumulates into an existing bucket range instead of allocating.
void hash_into(std::string_view token, double weight, std::span<double> bins) noexcept;

/// Throws SchemaError naming the offending group.
FeatureVector vectorize(const RawFeatures& raw);

}  // namespace ember
