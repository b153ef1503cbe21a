// Static PE (Portable Executable) parsing.
//
// parse_pe() accepts arbitrary bytes and never throws on malformed input:
// every failure mode is encoded in ParsedPe::status. Offsets and sizes read
// from the file are clamped to the buffer, and every table walk is bounded.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ember {

using ByteView = std::span<const std::uint8_t>;

/// Upper bound on the number of section headers read from one file.
inline constexpr std::size_t kMaxSections = 96;

struct CoffHeader {
    std::uint32_t timestamp = 0;
    std::uint16_t machine_raw = 0;
    std::string machine;
    std::uint16_t characteristics_raw = 0;
    std::vector<std::string> characteristics;
    std::uint32_t num_sections = 0;  // as declared; see ParsedPe::sections for what was read
    std::uint32_t num_symbols = 0;

    bool operator==(const CoffHeader&) const = default;
};

struct OptionalHeader {
    std::string magic;  // "PE32", "PE32+" or empty when unrecognized
    std::uint16_t subsystem_raw = 0;
    std::string subsystem;
    std::uint16_t dll_characteristics_raw = 0;
    std::vector<std::string> dll_characteristics;
    std::uint32_t major_image_version = 0;
    std::uint32_t minor_image_version = 0;
    std::uint32_t major_linker_version = 0;
    std::uint32_t minor_linker_version = 0;
    std::uint32_t major_operating_system_version = 0;
    std::uint32_t minor_operating_system_version = 0;
    std::uint32_t major_subsystem_version = 0;
    std::uint32_t minor_subsystem_version = 0;
    std::uint64_t sizeof_code = 0;
    std::uint64_t sizeof_headers = 0;
    std::uint64_t sizeof_heap_commit = 0;
    std::uint64_t sizeof_image = 0;
    std::uint32_t entry_point_rva = 0;

    bool operator==(const OptionalHeader&) const = default;
};

struct SectionEntry {
    std::string name;
    std::uint64_t size = 0;   // raw bytes actually present in the file
    std::uint64_t vsize = 0;
    double entropy = 0.0;
    std::vector<std::string> props;
    std::uint64_t raw_offset = 0;
    std::uint32_t virtual_address = 0;
    std::uint32_t characteristics_raw = 0;

    bool operator==(const SectionEntry&) const = default;
};

enum class ParseStatus { ok, degraded, failed };

/// Library name and its imported functions, in import-directory order.
using ImportTable = std::vector<std::pair<std::string, std::vector<std::string>>>;

struct ParsedPe {
    CoffHeader coff;
    OptionalHeader optional;
    std::vector<SectionEntry> sections;
    ImportTable imports;
    std::vector<std::string> exports;
    bool has_debug = false;
    bool has_relocations = false;
    bool has_resources = false;
    bool has_signature = false;
    bool has_tls = false;
    ParseStatus status = ParseStatus::ok;
    std::string status_reason;

    bool ok() const noexcept { return status == ParseStatus::ok; }
    bool failed() const noexcept { return status == ParseStatus::failed; }
    std::size_t import_function_count() const noexcept;

    bool operator==(const ParsedPe&) const = default;
};

ParsedPe parse_pe(ByteView bytes);

/// Name of the section whose virtual range holds the entry point, or "".
std::string entry_section(const ParsedPe& parsed);

/// Shannon entropy (bits, base 2) of the byte-value distribution.
double section_entropy(ByteView bytes) noexcept;

// Symbolic names for header fields. Unknown values render as
// "UNKNOWN_0x<hex>"; flag sets list known names in ascending bit order.
std::string machine_name(std::uint16_t machine);
std::string subsystem_name(std::uint16_t subsystem);
std::vector<std::string> coff_characteristic_names(std::uint16_t flags);
std::vector<std::string> dll_characteristic_names(std::uint16_t flags);
std::vector<std::string> section_characteristic_names(std::uint32_t flags);

/// Renders raw bytes as UTF-8, replacing bytes that are not part of a valid
/// UTF-8 sequence with the four characters "\x<hh>".
std::string escape_name(std::string_view raw);

std::string_view to_string(ParseStatus status) noexcept;

}  // namespace ember
