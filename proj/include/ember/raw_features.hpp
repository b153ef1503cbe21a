// Raw feature groups for one PE file, and their JSON-lines representation.

#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ember/pe_parse.hpp"

namespace ember {

/// A record or argument that does not satisfy the raw-feature schema.
/// group() names the feature group (or identity field) at fault.
class SchemaError : public std::runtime_error {
public:
    SchemaError(std::string group, const std::string& what)
        : std::runtime_error(group + ": " + what), group_(std::move(group)) {}

    const std::string& group() const noexcept { return group_; }

private:
    std::string group_;
};

struct GeneralInfo {
    std::uint64_t file_size = 0;
    std::uint64_t vsize = 0;
    std::uint32_t has_debug = 0;
    std::uint64_t exports = 0;
    std::uint64_t imports = 0;
    std::uint32_t has_relocations = 0;
    std::uint32_t has_resources = 0;
    std::uint32_t has_signature = 0;
    std::uint32_t has_tls = 0;
    std::uint64_t symbols = 0;

    bool operator==(const GeneralInfo&) const = default;
};

struct CoffInfo {
    std::uint64_t timestamp = 0;
    std::string machine;
    std::vector<std::string> characteristics;

    bool operator==(const CoffInfo&) const = default;
};

struct OptionalInfo {
    std::string subsystem;
    std::vector<std::string> dll_characteristics;
    std::string magic;
    std::uint64_t major_image_version = 0;
    std::uint64_t minor_image_version = 0;
    std::uint64_t major_linker_version = 0;
    std::uint64_t minor_linker_version = 0;
    std::uint64_t major_operating_system_version = 0;
    std::uint64_t minor_operating_system_version = 0;
    std::uint64_t major_subsystem_version = 0;
    std::uint64_t minor_subsystem_version = 0;
    std::uint64_t sizeof_code = 0;
    std::uint64_t sizeof_headers = 0;
    std::uint64_t sizeof_heap_commit = 0;

    bool operator==(const OptionalInfo&) const = default;
};

struct HeaderInfo {
    CoffInfo coff;
    OptionalInfo optional;

    bool operator==(const HeaderInfo&) const = default;
};

struct SectionRecord {
    std::string name;
    std::uint64_t size = 0;
    double entropy = 0.0;
    std::uint64_t vsize = 0;
    std::vector<std::string> props;

    bool operator==(const SectionRecord&) const = default;
};

struct SectionInfo {
    std::string entry;
    std::vector<SectionRecord> sections;

    bool operator==(const SectionInfo&) const = default;
};

inline constexpr std::size_t kPrintableBins = 96;

struct StringStats {
    std::uint64_t numstrings = 0;
    double avlength = 0.0;
    std::array<std::uint64_t, kPrintableBins> printabledist{};
    std::uint64_t printables = 0;
    double entropy = 0.0;
    std::uint64_t paths = 0;
    std::uint64_t urls = 0;
    std::uint64_t registry = 0;
    std::uint64_t MZ = 0;

    bool operator==(const StringStats&) const = default;
};

using ByteHistogram = std::array<std::uint64_t, 256>;

struct RawFeatures {
    std::string sha256;
    std::string appeared;
    int label = 0;
    GeneralInfo general;
    HeaderInfo header;
    ImportTable imports;
    std::vector<std::string> exports;
    SectionInfo section;
    ByteHistogram histogram{};
    ByteHistogram byteentropy{};
    StringStats strings;

    bool operator==(const RawFeatures&) const = default;
};

/// Throws SchemaError("appeared"/"label") on invalid arguments before
/// touching the bytes. When `parsed` is non-null it receives the parser
/// output the record was built from.
RawFeatures extract_raw(ByteView bytes, std::string_view appeared, int label, ParsedPe* parsed = nullptr);

ByteHistogram byte_histogram(ByteView bytes) noexcept;

inline constexpr std::size_t kEntropyWindow = 2048;
inline constexpr std::size_t kEntropyStep = 1024;

/// 16x16 joint histogram of (window entropy bin, byte >> 4), row-major by
/// entropy bin. Window entropy is computed over nibbles and rescaled to
/// [0, 8] bits; the entropy bin is min(floor(2 * H), 15).
ByteHistogram byte_entropy_histogram(ByteView bytes) noexcept;

StringStats string_stats(ByteView bytes) noexcept;

GeneralInfo general_info(const ParsedPe& parsed, ByteView bytes) noexcept;
HeaderInfo header_info(const ParsedPe& parsed);
SectionInfo section_info(const ParsedPe& parsed);

std::string sha256_hex(ByteView bytes);

bool valid_appeared(std::string_view appeared) noexcept;
constexpr bool valid_label(int label) noexcept { return label >= -1 && label <= 1; }

/// Checks value-level constraints that the C++ types cannot express.
void validate(const RawFeatures& raw);

/// Serializes to a single line of JSON (no trailing newline) with keys in
/// the published order.
std::string to_json_line(const RawFeatures& raw);

/// Parses one JSON object; throws SchemaError naming the offending group.
RawFeatures raw_from_json(std::string_view line);

}  // namespace ember
