#include "ember/pe_parse.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <optional>

namespace ember {

namespace {

constexpr std::size_t kMaxImportDescriptors = 4096;
constexpr std::size_t kMaxFunctionsPerLibrary = 16384;
constexpr std::size_t kMaxImportedFunctions = 262144;
constexpr std::size_t kMaxExportNames = 65536;
constexpr std::size_t kMaxNameLength = 4096;

constexpr std::uint16_t kMagicPe32 = 0x10b;
constexpr std::uint16_t kMagicPe32Plus = 0x20b;

enum DataDirectory : std::size_t {
    kExportDir = 0,
    kImportDir = 1,
    kResourceDir = 2,
    kSecurityDir = 4,
    kRelocDir = 5,
    kDebugDir = 6,
    kTlsDir = 9,
    kNumDirs = 16,
};

struct FlagName {
    std::uint32_t bit;
    const char* name;
};

constexpr std::array<FlagName, 15> kCoffFlags{{
    {0x0001, "RELOCS_STRIPPED"},
    {0x0002, "EXECUTABLE_IMAGE"},
    {0x0004, "LINE_NUMS_STRIPPED"},
    {0x0008, "LOCAL_SYMS_STRIPPED"},
    {0x0010, "AGGRESSIVE_WS_TRIM"},
    {0x0020, "LARGE_ADDRESS_AWARE"},
    {0x0080, "BYTES_REVERSED_LO"},
    {0x0100, "CHARA_32BIT_MACHINE"},
    {0x0200, "DEBUG_STRIPPED"},
    {0x0400, "REMOVABLE_RUN_FROM_SWAP"},
    {0x0800, "NET_RUN_FROM_SWAP"},
    {0x1000, "SYSTEM"},
    {0x2000, "DLL"},
    {0x4000, "UP_SYSTEM_ONLY"},
    {0x8000, "BYTES_REVERSED_HI"},
}};

constexpr std::array<FlagName, 11> kDllFlags{{
    {0x0020, "HIGH_ENTROPY_VA"},
    {0x0040, "DYNAMIC_BASE"},
    {0x0080, "FORCE_INTEGRITY"},
    {0x0100, "NX_COMPAT"},
    {0x0200, "NO_ISOLATION"},
    {0x0400, "NO_SEH"},
    {0x0800, "NO_BIND"},
    {0x1000, "APPCONTAINER"},
    {0x2000, "WDM_DRIVER"},
    {0x4000, "GUARD_CF"},
    {0x8000, "TERMINAL_SERVER_AWARE"},
}};

constexpr std::array<FlagName, 20> kSectionFlags{{
    {0x00000008, "TYPE_NO_PAD"},
    {0x00000020, "CNT_CODE"},
    {0x00000040, "CNT_INITIALIZED_DATA"},
    {0x00000080, "CNT_UNINITIALIZED_DATA"},
    {0x00000100, "LNK_OTHER"},
    {0x00000200, "LNK_INFO"},
    {0x00000800, "LNK_REMOVE"},
    {0x00001000, "LNK_COMDAT"},
    {0x00008000, "GPREL"},
    {0x00020000, "MEM_PURGEABLE"},
    {0x00040000, "MEM_LOCKED"},
    {0x00080000, "MEM_PRELOAD"},
    {0x01000000, "LNK_NRELOC_OVFL"},
    {0x02000000, "MEM_DISCARDABLE"},
    {0x04000000, "MEM_NOT_CACHED"},
    {0x08000000, "MEM_NOT_PAGED"},
    {0x10000000, "MEM_SHARED"},
    {0x20000000, "MEM_EXECUTE"},
    {0x40000000, "MEM_READ"},
    {0x80000000, "MEM_WRITE"},
}};

constexpr std::uint32_t kSectionAlignMask = 0x00F00000;

constexpr std::array<const char*, 15> kSectionAlignNames{{
    nullptr, "ALIGN_1BYTES", "ALIGN_2BYTES", "ALIGN_4BYTES", "ALIGN_8BYTES",
    "ALIGN_16BYTES", "ALIGN_32BYTES", "ALIGN_64BYTES", "ALIGN_128BYTES",
    "ALIGN_256BYTES", "ALIGN_512BYTES", "ALIGN_1024BYTES", "ALIGN_2048BYTES",
    "ALIGN_4096BYTES", "ALIGN_8192BYTES",
}};

std::string unknown_name(std::uint32_t value) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "UNKNOWN_0x%x", static_cast<unsigned>(value));
    return buf;
}

template <std::size_t N>
std::vector<std::string> flag_names(std::uint32_t flags, const std::array<FlagName, N>& table,
                                    std::uint32_t skip_mask = 0) {
    std::vector<std::string> out;
    for (std::uint32_t bit = 0; bit < 32; ++bit) {
        const std::uint32_t mask = 1u << bit;
        if ((flags & mask) == 0 || (skip_mask & mask) != 0) continue;
        auto it = std::find_if(table.begin(), table.end(),
                               [mask](const FlagName& f) { return f.bit == mask; });
        out.push_back(it != table.end() ? std::string(it->name) : unknown_name(mask));
    }
    return out;
}

/// Bounds-checked little-endian reads over the file image.
class Reader {
public:
    explicit Reader(ByteView bytes) : bytes_(bytes) {}

    std::size_t size() const noexcept { return bytes_.size(); }

    bool has(std::uint64_t offset, std::uint64_t length) const noexcept {
        return offset <= bytes_.size() && length <= bytes_.size() - offset;
    }

    template <typename T>
    std::optional<T> read(std::uint64_t offset) const noexcept {
        if (!has(offset, sizeof(T))) return std::nullopt;
        T value = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            value |= static_cast<T>(static_cast<T>(bytes_[offset + i]) << (8 * i));
        }
        return value;
    }

    ByteView slice(std::uint64_t offset, std::uint64_t length) const noexcept {
        if (offset >= bytes_.size()) return {};
        const auto avail = bytes_.size() - offset;
        return bytes_.subspan(offset, static_cast<std::size_t>(std::min<std::uint64_t>(length, avail)));
    }

    /// NUL-terminated string, stopping at EOF or after kMaxNameLength bytes.
    std::string cstring(std::uint64_t offset) const {
        std::string out;
        for (std::uint64_t i = offset; i < bytes_.size() && out.size() < kMaxNameLength; ++i) {
            if (bytes_[i] == 0) break;
            out.push_back(static_cast<char>(bytes_[i]));
        }
        return out;
    }

private:
    ByteView bytes_;
};

struct RawSection {
    std::uint32_t virtual_address = 0;
    std::uint32_t virtual_size = 0;
    std::uint32_t raw_size = 0;
    std::uint32_t raw_pointer = 0;
};

struct DirEntry {
    std::uint32_t rva = 0;
    std::uint32_t size = 0;
    bool present() const noexcept { return rva != 0 && size != 0; }
};

class PeParser {
public:
    explicit PeParser(ByteView bytes) : in_(bytes) {}

    ParsedPe run() {
        if (in_.size() < 2 || in_.slice(0, 2)[0] != 'M' || in_.slice(0, 2)[1] != 'Z') {
            return failure("no MZ signature");
        }
        const auto lfanew = in_.read<std::uint32_t>(0x3c);
        if (!lfanew) return failure("no PE signature");
        const std::uint64_t pe_offset = *lfanew;
        const auto signature = in_.read<std::uint32_t>(pe_offset);
        if (!signature || *signature != 0x00004550u) return failure("no PE signature");
        if (!in_.has(pe_offset + 4, 20)) return failure("truncated COFF header");

        parse_coff(pe_offset + 4);
        const std::uint64_t optional_offset = pe_offset + 24;
        parse_optional(optional_offset);
        parse_sections(optional_offset + size_of_optional_);
        if (wide_ != Width::unknown) {
            if (dirs_[kImportDir].present()) parse_imports();
            if (dirs_[kExportDir].present()) parse_exports();
        }

        out_.has_debug = dirs_[kDebugDir].present();
        out_.has_relocations = dirs_[kRelocDir].present();
        out_.has_resources = dirs_[kResourceDir].present();
        out_.has_signature = dirs_[kSecurityDir].size != 0;
        out_.has_tls = dirs_[kTlsDir].present();
        return std::move(out_);
    }

private:
    enum class Width { unknown, pe32, pe32_plus };

    ParsedPe failure(const char* reason) const {
        ParsedPe failed;
        failed.status = ParseStatus::failed;
        failed.status_reason = reason;
        return failed;
    }

    void degrade(const char* reason) {
        if (out_.status == ParseStatus::ok) {
            out_.status = ParseStatus::degraded;
            out_.status_reason = reason;
        }
    }

    void parse_coff(std::uint64_t at) {
        auto& coff = out_.coff;
        coff.machine_raw = *in_.read<std::uint16_t>(at);
        coff.machine = machine_name(coff.machine_raw);
        declared_sections_ = *in_.read<std::uint16_t>(at + 2);
        coff.num_sections = declared_sections_;
        coff.timestamp = *in_.read<std::uint32_t>(at + 4);
        coff.num_symbols = *in_.read<std::uint32_t>(at + 12);
        size_of_optional_ = *in_.read<std::uint16_t>(at + 16);
        coff.characteristics_raw = *in_.read<std::uint16_t>(at + 18);
        coff.characteristics = coff_characteristic_names(coff.characteristics_raw);
    }

    template <typename T>
    T field(std::uint64_t at) {
        if (auto v = in_.read<T>(at)) return *v;
        degrade("truncated optional header");
        return 0;
    }

    void parse_optional(std::uint64_t at) {
        auto& opt = out_.optional;
        const auto magic = in_.read<std::uint16_t>(at);
        if (!magic) {
            degrade("truncated optional header");
            return;
        }
        if (*magic == kMagicPe32) {
            wide_ = Width::pe32;
            opt.magic = "PE32";
        } else if (*magic == kMagicPe32Plus) {
            wide_ = Width::pe32_plus;
            opt.magic = "PE32+";
        } else {
            degrade("unrecognized optional header magic");
            return;
        }
        const bool plus = wide_ == Width::pe32_plus;

        opt.major_linker_version = field<std::uint8_t>(at + 2);
        opt.minor_linker_version = field<std::uint8_t>(at + 3);
        opt.sizeof_code = field<std::uint32_t>(at + 4);
        opt.entry_point_rva = field<std::uint32_t>(at + 16);
        opt.major_operating_system_version = field<std::uint16_t>(at + 40);
        opt.minor_operating_system_version = field<std::uint16_t>(at + 42);
        opt.major_image_version = field<std::uint16_t>(at + 44);
        opt.minor_image_version = field<std::uint16_t>(at + 46);
        opt.major_subsystem_version = field<std::uint16_t>(at + 48);
        opt.minor_subsystem_version = field<std::uint16_t>(at + 50);
        opt.sizeof_image = field<std::uint32_t>(at + 56);
        opt.sizeof_headers = field<std::uint32_t>(at + 60);
        opt.subsystem_raw = field<std::uint16_t>(at + 68);
        opt.subsystem = subsystem_name(opt.subsystem_raw);
        opt.dll_characteristics_raw = field<std::uint16_t>(at + 70);
        opt.dll_characteristics = dll_characteristic_names(opt.dll_characteristics_raw);
        opt.sizeof_heap_commit = plus ? field<std::uint64_t>(at + 96) : field<std::uint32_t>(at + 84);

        const std::uint64_t count_at = plus ? at + 108 : at + 92;
        const std::uint64_t dirs_at = plus ? at + 112 : at + 96;
        const auto declared = field<std::uint32_t>(count_at);
        const auto count = std::min<std::uint32_t>(declared, kNumDirs);
        for (std::uint32_t i = 0; i < count; ++i) {
            const auto rva = in_.read<std::uint32_t>(dirs_at + 8ull * i);
            const auto size = in_.read<std::uint32_t>(dirs_at + 8ull * i + 4);
            if (!rva || !size) {
                degrade("truncated data directories");
                break;
            }
            dirs_[i] = DirEntry{*rva, *size};
        }
    }

    void parse_sections(std::uint64_t at) {
        std::size_t wanted = declared_sections_;
        if (wanted > kMaxSections) {
            wanted = kMaxSections;
            degrade("section count clamped");
        }
        for (std::size_t i = 0; i < wanted; ++i) {
            const std::uint64_t hdr = at + 40ull * i;
            if (!in_.has(hdr, 40)) {
                degrade("truncated section table");
                break;
            }
            RawSection raw;
            raw.virtual_size = *in_.read<std::uint32_t>(hdr + 8);
            raw.virtual_address = *in_.read<std::uint32_t>(hdr + 12);
            raw.raw_size = *in_.read<std::uint32_t>(hdr + 16);
            raw.raw_pointer = *in_.read<std::uint32_t>(hdr + 20);

            const auto name_bytes = in_.slice(hdr, 8);
            std::string_view name(reinterpret_cast<const char*>(name_bytes.data()), name_bytes.size());
            while (!name.empty() && name.back() == '\0') name.remove_suffix(1);

            SectionEntry section;
            section.name = escape_name(name);
            section.vsize = raw.virtual_size;
            section.virtual_address = raw.virtual_address;
            section.raw_offset = raw.raw_pointer;
            section.characteristics_raw = *in_.read<std::uint32_t>(hdr + 36);
            section.props = section_characteristic_names(section.characteristics_raw);
            const auto data = in_.slice(raw.raw_pointer, raw.raw_size);
            section.size = data.size();
            section.entropy = section_entropy(data);

            raw_sections_.push_back(raw);
            out_.sections.push_back(std::move(section));
        }
    }

    std::optional<std::uint64_t> rva_to_offset(std::uint64_t rva) const noexcept {
        for (const auto& s : raw_sections_) {
            const std::uint64_t span = std::max(s.virtual_size, s.raw_size);
            if (rva >= s.virtual_address && rva < s.virtual_address + span) {
                const std::uint64_t delta = rva - s.virtual_address;
                if (delta >= s.raw_size) return std::nullopt;
                const std::uint64_t offset = s.raw_pointer + delta;
                if (offset >= in_.size()) return std::nullopt;
                return offset;
            }
        }
        if (rva < out_.optional.sizeof_headers && rva < in_.size()) return rva;
        return std::nullopt;
    }

    std::optional<std::string> name_at(std::uint64_t rva) const {
        const auto offset = rva_to_offset(rva);
        if (!offset) return std::nullopt;
        return in_.cstring(*offset);
    }

    void parse_imports() {
        const auto table = rva_to_offset(dirs_[kImportDir].rva);
        if (!table) {
            degrade("import directory not mapped");
            return;
        }
        const bool plus = wide_ == Width::pe32_plus;
        const std::uint64_t thunk_size = plus ? 8 : 4;
        std::size_t total = 0;

        for (std::size_t i = 0; i < kMaxImportDescriptors; ++i) {
            const std::uint64_t desc = *table + 20ull * i;
            if (!in_.has(desc, 20)) {
                degrade("truncated import directory");
                return;
            }
            const auto lookup = *in_.read<std::uint32_t>(desc);
            const auto name_rva = *in_.read<std::uint32_t>(desc + 12);
            const auto address = *in_.read<std::uint32_t>(desc + 16);
            if (lookup == 0 && name_rva == 0 && address == 0 &&
                *in_.read<std::uint32_t>(desc + 4) == 0 && *in_.read<std::uint32_t>(desc + 8) == 0) {
                return;
            }
            const auto library = name_at(name_rva);
            if (!library) {
                degrade("import library name not mapped");
                continue;
            }
            auto& functions = library_entry(escape_name(*library));

            const auto thunks = rva_to_offset(lookup != 0 ? lookup : address);
            if (!thunks) {
                degrade("import thunks not mapped");
                continue;
            }
            for (std::size_t j = 0; j < kMaxFunctionsPerLibrary; ++j) {
                const std::uint64_t at = *thunks + thunk_size * j;
                std::uint64_t thunk = 0;
                if (plus) {
                    const auto v = in_.read<std::uint64_t>(at);
                    if (!v) { degrade("truncated import thunks"); break; }
                    thunk = *v;
                } else {
                    const auto v = in_.read<std::uint32_t>(at);
                    if (!v) { degrade("truncated import thunks"); break; }
                    thunk = *v;
                }
                if (thunk == 0) break;
                if (++total > kMaxImportedFunctions) {
                    degrade("import count limit reached");
                    return;
                }
                const std::uint64_t ordinal_flag = plus ? (1ull << 63) : (1ull << 31);
                if (thunk & ordinal_flag) {
                    functions.push_back("ordinal" + std::to_string(thunk & 0xffff));
                    continue;
                }
                const auto name = name_at((thunk & 0x7fffffffu) + 2);
                if (!name) {
                    degrade("import name not mapped");
                    continue;
                }
                functions.push_back(escape_name(*name));
            }
        }
        degrade("import descriptor limit reached");
    }

    std::vector<std::string>& library_entry(std::string name) {
        for (auto& [lib, functions] : out_.imports) {
            if (lib == name) return functions;
        }
        out_.imports.emplace_back(std::move(name), std::vector<std::string>{});
        return out_.imports.back().second;
    }

    void parse_exports() {
        const auto dir = rva_to_offset(dirs_[kExportDir].rva);
        if (!dir || !in_.has(*dir, 40)) {
            degrade("export directory not mapped");
            return;
        }
        auto count = *in_.read<std::uint32_t>(*dir + 24);
        const auto names_rva = *in_.read<std::uint32_t>(*dir + 32);
        if (count == 0) return;
        if (count > kMaxExportNames) {
            count = kMaxExportNames;
            degrade("export count clamped");
        }
        const auto names = rva_to_offset(names_rva);
        if (!names) {
            degrade("export name table not mapped");
            return;
        }
        for (std::uint32_t i = 0; i < count; ++i) {
            const auto name_rva = in_.read<std::uint32_t>(*names + 4ull * i);
            if (!name_rva) {
                degrade("truncated export name table");
                return;
            }
            const auto name = name_at(*name_rva);
            if (!name) {
                degrade("export name not mapped");
                continue;
            }
            out_.exports.push_back(escape_name(*name));
        }
    }

    Reader in_;
    ParsedPe out_;
    Width wide_ = Width::unknown;
    std::uint16_t declared_sections_ = 0;
    std::uint16_t size_of_optional_ = 0;
    std::array<DirEntry, kNumDirs> dirs_{};
    std::vector<RawSection> raw_sections_;
};

}  // namespace

std::size_t ParsedPe::import_function_count() const noexcept {
    std::size_t n = 0;
    for (const auto& [lib, functions] : imports) n += functions.size();
    return n;
}

ParsedPe parse_pe(ByteView bytes) {
    return PeParser(bytes).run();
}

std::string entry_section(const ParsedPe& parsed) {
    if (parsed.failed()) return {};
    const std::uint64_t entry = parsed.optional.entry_point_rva;
    for (const auto& s : parsed.sections) {
        const std::uint64_t span = std::max(s.vsize, s.size);
        if (entry >= s.virtual_address && entry < s.virtual_address + span) return s.name;
    }
    return {};
}

double section_entropy(ByteView bytes) noexcept {
    if (bytes.empty()) return 0.0;
    std::array<std::uint64_t, 256> counts{};
    for (auto b : bytes) ++counts[b];
    const double n = static_cast<double>(bytes.size());
    double h = 0.0;
    for (auto c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / n;
        h -= p * std::log2(p);
    }
    return std::clamp(h, 0.0, 8.0);
}

std::string machine_name(std::uint16_t machine) {
    switch (machine) {
        case 0x0000: return "UNKNOWN";
        case 0x014c: return "I386";
        case 0x0166: return "R4000";
        case 0x0169: return "WCEMIPSV2";
        case 0x01a2: return "SH3";
        case 0x01a3: return "SH3DSP";
        case 0x01a6: return "SH4";
        case 0x01a8: return "SH5";
        case 0x01c0: return "ARM";
        case 0x01c2: return "THUMB";
        case 0x01c4: return "ARMNT";
        case 0x01d3: return "AM33";
        case 0x01f0: return "POWERPC";
        case 0x01f1: return "POWERPCFP";
        case 0x0200: return "IA64";
        case 0x0266: return "MIPS16";
        case 0x0366: return "MIPSFPU";
        case 0x0466: return "MIPSFPU16";
        case 0x0ebc: return "EBC";
        case 0x5032: return "RISCV32";
        case 0x5064: return "RISCV64";
        case 0x5128: return "RISCV128";
        case 0x8664: return "AMD64";
        case 0x9041: return "M32R";
        case 0xaa64: return "ARM64";
        default: return unknown_name(machine);
    }
}

std::string subsystem_name(std::uint16_t subsystem) {
    switch (subsystem) {
        case 0: return "UNKNOWN";
        case 1: return "NATIVE";
        case 2: return "WINDOWS_GUI";
        case 3: return "WINDOWS_CUI";
        case 5: return "OS2_CUI";
        case 7: return "POSIX_CUI";
        case 8: return "NATIVE_WINDOWS";
        case 9: return "WINDOWS_CE_GUI";
        case 10: return "EFI_APPLICATION";
        case 11: return "EFI_BOOT_SERVICE_DRIVER";
        case 12: return "EFI_RUNTIME_DRIVER";
        case 13: return "EFI_ROM";
        case 14: return "XBOX";
        case 16: return "WINDOWS_BOOT_APPLICATION";
        default: return unknown_name(subsystem);
    }
}

std::vector<std::string> coff_characteristic_names(std::uint16_t flags) {
    return flag_names(flags, kCoffFlags);
}

std::vector<std::string> dll_characteristic_names(std::uint16_t flags) {
    return flag_names(flags, kDllFlags);
}

std::vector<std::string> section_characteristic_names(std::uint32_t flags) {
    // The alignment nibble is an enumerated field, not a set of bits; it is
    // reported in its bit position among the flags.
    auto low = flag_names(flags & 0x000FFFFF, kSectionFlags);
    const auto align = (flags & kSectionAlignMask) >> 20;
    if (align != 0) {
        low.push_back(align < kSectionAlignNames.size() ? std::string(kSectionAlignNames[align])
                                                        : unknown_name(flags & kSectionAlignMask));
    }
    auto high = flag_names(flags & 0xFF000000, kSectionFlags);
    low.insert(low.end(), high.begin(), high.end());
    return low;
}

std::string escape_name(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    const auto byte = [&](std::size_t i) { return static_cast<std::uint8_t>(raw[i]); };
    std::size_t i = 0;
    while (i < raw.size()) {
        const std::uint8_t lead = byte(i);
        std::size_t len = 0;
        std::uint32_t min_cp = 0;
        std::uint32_t cp = 0;
        if (lead < 0x80) {
            out.push_back(static_cast<char>(lead));
            ++i;
            continue;
        } else if ((lead & 0xE0) == 0xC0) {
            len = 2; min_cp = 0x80; cp = lead & 0x1F;
        } else if ((lead & 0xF0) == 0xE0) {
            len = 3; min_cp = 0x800; cp = lead & 0x0F;
        } else if ((lead & 0xF8) == 0xF0) {
            len = 4; min_cp = 0x10000; cp = lead & 0x07;
        }
        bool valid = len != 0 && i + len <= raw.size();
        for (std::size_t k = 1; valid && k < len; ++k) {
            if ((byte(i + k) & 0xC0) != 0x80) valid = false;
            else cp = (cp << 6) | (byte(i + k) & 0x3F);
        }
        valid = valid && cp >= min_cp && cp <= 0x10FFFF && !(cp >= 0xD800 && cp <= 0xDFFF);
        if (valid) {
            out.append(raw.substr(i, len));
            i += len;
        } else {
            char buf[8];
            std::snprintf(buf, sizeof buf, "\\x%02x", lead);
            out += buf;
            ++i;
        }
    }
    return out;
}

std::string_view to_string(ParseStatus status) noexcept {
    switch (status) {
        case ParseStatus::ok: return "ok";
        case ParseStatus::degraded: return "degraded";
        case ParseStatus::failed: return "failed";
    }
    return "failed";
}

}  // namespace ember
