#include "ember/raw_features.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cctype>

#include "json.hpp"

namespace ember {

using Json = nlohmann::ordered_json;

namespace {

constexpr std::uint8_t kFirstPrintable = 0x20;
constexpr std::uint8_t kLastPrintable = 0x7f;
constexpr std::size_t kMinStringLength = 5;

bool printable(std::uint8_t b) noexcept {
    return b >= kFirstPrintable && b <= kLastPrintable;
}

double entropy_of_counts(std::span<const std::uint64_t> counts, double total) noexcept {
    if (total <= 0.0) return 0.0;
    double h = 0.0;
    for (auto c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / total;
        h -= p * std::log2(p);
    }
    return h;
}

bool matches_at(ByteView bytes, std::size_t i, std::string_view pattern, bool fold) noexcept {
    if (bytes.size() - i < pattern.size()) return false;
    for (std::size_t k = 0; k < pattern.size(); ++k) {
        auto b = static_cast<unsigned char>(bytes[i + k]);
        if (fold && b >= 'A' && b <= 'Z') b = static_cast<unsigned char>(b - 'A' + 'a');
        if (b != static_cast<unsigned char>(pattern[k])) return false;
    }
    return true;
}

}  // namespace

ByteHistogram byte_histogram(ByteView bytes) noexcept {
    ByteHistogram h{};
    for (auto b : bytes) ++h[b];
    return h;
}

ByteHistogram byte_entropy_histogram(ByteView bytes) noexcept {
    ByteHistogram out{};
    if (bytes.empty()) return out;

    const std::size_t window = std::min(bytes.size(), kEntropyWindow);
    std::array<std::uint64_t, 16> nibbles{};
    for (std::size_t i = 0; i < window; ++i) ++nibbles[bytes[i] >> 4];

    for (std::size_t start = 0;;) {
        const double h = 2.0 * entropy_of_counts(nibbles, static_cast<double>(window));
        const auto bin = std::min<std::size_t>(static_cast<std::size_t>(std::floor(2.0 * h)), 15);
        for (std::size_t v = 0; v < 16; ++v) out[bin * 16 + v] += nibbles[v];

        const std::size_t next = start + kEntropyStep;
        if (next + kEntropyWindow > bytes.size()) break;
        for (std::size_t i = start; i < next; ++i) --nibbles[bytes[i] >> 4];
        for (std::size_t i = start + kEntropyWindow; i < next + kEntropyWindow; ++i) ++nibbles[bytes[i] >> 4];
        start = next;
    }
    return out;
}

StringStats string_stats(ByteView bytes) noexcept {
    StringStats s;
    std::size_t run_start = 0;
    bool in_run = false;
    const auto close_run = [&](std::size_t end) {
        const std::size_t len = end - run_start;
        if (len < kMinStringLength) return;
        ++s.numstrings;
        s.printables += len;
        for (std::size_t i = run_start; i < end; ++i) ++s.printabledist[bytes[i] - kFirstPrintable];
    };

    for (std::size_t i = 0; i < bytes.size(); ++i) {
        const auto b = bytes[i];
        if (printable(b)) {
            if (!in_run) {
                in_run = true;
                run_start = i;
            }
        } else if (in_run) {
            in_run = false;
            close_run(i);
        }
        if (matches_at(bytes, i, "c:\\", true)) ++s.paths;
        if (matches_at(bytes, i, "http://", true) || matches_at(bytes, i, "https://", true)) ++s.urls;
        if (matches_at(bytes, i, "HKEY_", false)) ++s.registry;
        if (matches_at(bytes, i, "MZ", false)) ++s.MZ;
    }
    if (in_run) close_run(bytes.size());

    if (s.numstrings > 0) {
        s.avlength = static_cast<double>(s.printables) / static_cast<double>(s.numstrings);
        s.entropy = entropy_of_counts(s.printabledist, static_cast<double>(s.printables));
    }
    return s;
}

GeneralInfo general_info(const ParsedPe& parsed, ByteView bytes) noexcept {
    GeneralInfo g;
    g.file_size = bytes.size();
    if (parsed.failed()) return g;
    g.vsize = parsed.optional.sizeof_image;
    g.has_debug = parsed.has_debug;
    g.exports = parsed.exports.size();
    g.imports = parsed.import_function_count();
    g.has_relocations = parsed.has_relocations;
    g.has_resources = parsed.has_resources;
    g.has_signature = parsed.has_signature;
    g.has_tls = parsed.has_tls;
    g.symbols = parsed.coff.num_symbols;
    return g;
}

HeaderInfo header_info(const ParsedPe& parsed) {
    HeaderInfo h;
    const auto& coff = parsed.coff;
    const auto& opt = parsed.optional;
    h.coff.timestamp = coff.timestamp;
    h.coff.machine = coff.machine;
    h.coff.characteristics = coff.characteristics;
    auto& o = h.optional;
    o.subsystem = opt.subsystem;
    o.dll_characteristics = opt.dll_characteristics;
    o.magic = opt.magic;
    o.major_image_version = opt.major_image_version;
    o.minor_image_version = opt.minor_image_version;
    o.major_linker_version = opt.major_linker_version;
    o.minor_linker_version = opt.minor_linker_version;
    o.major_operating_system_version = opt.major_operating_system_version;
    o.minor_operating_system_version = opt.minor_operating_system_version;
    o.major_subsystem_version = opt.major_subsystem_version;
    o.minor_subsystem_version = opt.minor_subsystem_version;
    o.sizeof_code = opt.sizeof_code;
    o.sizeof_headers = opt.sizeof_headers;
    o.sizeof_heap_commit = opt.sizeof_heap_commit;
    return h;
}

SectionInfo section_info(const ParsedPe& parsed) {
    SectionInfo info;
    info.entry = entry_section(parsed);
    for (const auto& s : parsed.sections) {
        info.sections.push_back(SectionRecord{s.name, s.size, s.entropy, s.vsize, s.props});
    }
    return info;
}

std::string sha256_hex(ByteView bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256 digest failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * length);
    for (unsigned i = 0; i < length; ++i) {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 0xf]);
    }
    return out;
}

bool valid_appeared(std::string_view appeared) noexcept {
    if (appeared.size() != 7 || appeared[4] != '-') return false;
    for (std::size_t i = 0; i < appeared.size(); ++i) {
        if (i != 4 && !std::isdigit(static_cast<unsigned char>(appeared[i]))) return false;
    }
    return true;
}

RawFeatures extract_raw(ByteView bytes, std::string_view appeared, int label, ParsedPe* parsed_out) {
    if (!valid_appeared(appeared)) {
        throw SchemaError("appeared", "expected YYYY-MM, got \"" + std::string(appeared) + "\"");
    }
    if (!valid_label(label)) {
        throw SchemaError("label", "expected -1, 0 or 1, got " + std::to_string(label));
    }

    const ParsedPe parsed = parse_pe(bytes);
    RawFeatures raw;
    raw.sha256 = sha256_hex(bytes);
    raw.appeared = std::string(appeared);
    raw.label = label;
    raw.general = general_info(parsed, bytes);
    raw.header = header_info(parsed);
    raw.imports = parsed.imports;
    raw.exports = parsed.exports;
    raw.section = section_info(parsed);
    raw.histogram = byte_histogram(bytes);
    raw.byteentropy = byte_entropy_histogram(bytes);
    raw.strings = string_stats(bytes);
    if (parsed_out) *parsed_out = parsed;
    return raw;
}

void validate(const RawFeatures& raw) {
    const auto is_hex = [](char c) { return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'); };
    if (raw.sha256.size() != 64 || !std::all_of(raw.sha256.begin(), raw.sha256.end(), is_hex)) {
        throw SchemaError("sha256", "expected 64 lowercase hex characters");
    }
    if (!valid_appeared(raw.appeared)) throw SchemaError("appeared", "expected YYYY-MM");
    if (!valid_label(raw.label)) throw SchemaError("label", "expected -1, 0 or 1");
    if (raw.general.has_debug > 1 || raw.general.has_relocations > 1 || raw.general.has_resources > 1 ||
        raw.general.has_signature > 1 || raw.general.has_tls > 1) {
        throw SchemaError("general", "presence flags must be 0 or 1");
    }
    for (const auto& s : raw.section.sections) {
        if (!std::isfinite(s.entropy) || s.entropy < 0.0 || s.entropy > 8.0) {
            throw SchemaError("section", "section entropy outside [0, 8]");
        }
    }
    std::uint64_t histogram_total = 0;
    for (auto c : raw.histogram) histogram_total += c;
    if (histogram_total != raw.general.file_size) {
        throw SchemaError("histogram", "counts sum to " + std::to_string(histogram_total) +
                                           ", file_size is " + std::to_string(raw.general.file_size));
    }
    const auto& st = raw.strings;
    std::uint64_t printable_total = 0;
    for (auto c : st.printabledist) printable_total += c;
    if (printable_total != st.printables) {
        throw SchemaError("strings", "printabledist does not sum to printables");
    }
    if (!std::isfinite(st.avlength) || st.avlength < 0.0) {
        throw SchemaError("strings", "avlength must be finite and non-negative");
    }
    if (!std::isfinite(st.entropy) || st.entropy < 0.0 || st.entropy > std::log2(96.0) + 1e-9) {
        throw SchemaError("strings", "entropy outside [0, log2(96)]");
    }
}

// ---------------------------------------------------------------------------
// JSON encoding

namespace {

Json strings_array(const std::vector<std::string>& values) {
    Json out = Json::array();
    for (const auto& v : values) out.push_back(v);
    return out;
}

template <std::size_t N>
Json counts_array(const std::array<std::uint64_t, N>& values) {
    Json out = Json::array();
    for (auto v : values) out.push_back(v);
    return out;
}

Json to_json(const RawFeatures& raw) {
    Json j;
    j["sha256"] = raw.sha256;
    j["appeared"] = raw.appeared;
    j["label"] = raw.label;

    const auto& g = raw.general;
    j["general"] = Json{
        {"file_size", g.file_size}, {"vsize", g.vsize},
        {"has_debug", g.has_debug}, {"exports", g.exports},
        {"imports", g.imports}, {"has_relocations", g.has_relocations},
        {"has_resources", g.has_resources}, {"has_signature", g.has_signature},
        {"has_tls", g.has_tls}, {"symbols", g.symbols},
    };

    const auto& c = raw.header.coff;
    const auto& o = raw.header.optional;
    Json coff;
    coff["timestamp"] = c.timestamp;
    coff["machine"] = c.machine;
    coff["characteristics"] = strings_array(c.characteristics);
    Json optional;
    optional["subsystem"] = o.subsystem;
    optional["dll_characteristics"] = strings_array(o.dll_characteristics);
    optional["magic"] = o.magic;
    optional["major_image_version"] = o.major_image_version;
    optional["minor_image_version"] = o.minor_image_version;
    optional["major_linker_version"] = o.major_linker_version;
    optional["minor_linker_version"] = o.minor_linker_version;
    optional["major_operating_system_version"] = o.major_operating_system_version;
    optional["minor_operating_system_version"] = o.minor_operating_system_version;
    optional["major_subsystem_version"] = o.major_subsystem_version;
    optional["minor_subsystem_version"] = o.minor_subsystem_version;
    optional["sizeof_code"] = o.sizeof_code;
    optional["sizeof_headers"] = o.sizeof_headers;
    optional["sizeof_heap_commit"] = o.sizeof_heap_commit;
    j["header"]["coff"] = std::move(coff);
    j["header"]["optional"] = std::move(optional);

    Json imports = Json::object();
    for (const auto& [lib, functions] : raw.imports) imports[lib] = strings_array(functions);
    j["imports"] = std::move(imports);
    j["exports"] = strings_array(raw.exports);

    Json sections = Json::array();
    for (const auto& s : raw.section.sections) {
        Json rec;
        rec["name"] = s.name;
        rec["size"] = s.size;
        rec["entropy"] = s.entropy;
        rec["vsize"] = s.vsize;
        rec["props"] = strings_array(s.props);
        sections.push_back(std::move(rec));
    }
    j["section"]["entry"] = raw.section.entry;
    j["section"]["sections"] = std::move(sections);

    j["histogram"] = counts_array(raw.histogram);
    j["byteentropy"] = counts_array(raw.byteentropy);

    const auto& s = raw.strings;
    Json strings;
    strings["numstrings"] = s.numstrings;
    strings["avlength"] = s.avlength;
    strings["printabledist"] = counts_array(s.printabledist);
    strings["printables"] = s.printables;
    strings["entropy"] = s.entropy;
    strings["paths"] = s.paths;
    strings["urls"] = s.urls;
    strings["registry"] = s.registry;
    strings["MZ"] = s.MZ;
    j["strings"] = std::move(strings);
    return j;
}

// Decoding helpers. Each takes the group name used for error reporting.

const Json& member(const Json& obj, const char* key, const std::string& group) {
    if (!obj.is_object()) throw SchemaError(group, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw SchemaError(group, std::string("missing key \"") + key + "\"");
    return *it;
}

std::uint64_t get_count(const Json& obj, const char* key, const std::string& group) {
    const auto& v = member(obj, key, group);
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
    throw SchemaError(group, std::string("\"") + key + "\" must be a non-negative integer");
}

double get_real(const Json& obj, const char* key, const std::string& group) {
    const auto& v = member(obj, key, group);
    if (!v.is_number()) throw SchemaError(group, std::string("\"") + key + "\" must be a number");
    return v.get<double>();
}

std::string get_string(const Json& obj, const char* key, const std::string& group) {
    const auto& v = member(obj, key, group);
    if (!v.is_string()) throw SchemaError(group, std::string("\"") + key + "\" must be a string");
    return v.get<std::string>();
}

std::vector<std::string> string_list(const Json& v, const std::string& group, const char* what) {
    if (!v.is_array()) throw SchemaError(group, std::string(what) + " must be an array of strings");
    std::vector<std::string> out;
    out.reserve(v.size());
    for (const auto& item : v) {
        if (!item.is_string()) throw SchemaError(group, std::string(what) + " must be an array of strings");
        out.push_back(item.get<std::string>());
    }
    return out;
}

template <std::size_t N>
std::array<std::uint64_t, N> count_array(const Json& v, const std::string& group) {
    if (!v.is_array() || v.size() != N) {
        throw SchemaError(group, "expected an array of " + std::to_string(N) + " counts");
    }
    std::array<std::uint64_t, N> out{};
    for (std::size_t i = 0; i < N; ++i) {
        const auto& item = v[i];
        if (item.is_number_unsigned() || (item.is_number_integer() && item.get<std::int64_t>() >= 0)) {
            out[i] = item.get<std::uint64_t>();
        } else {
            throw SchemaError(group, "entry " + std::to_string(i) + " is not a non-negative integer");
        }
    }
    return out;
}

std::uint32_t get_flag(const Json& obj, const char* key, const std::string& group) {
    const auto v = get_count(obj, key, group);
    if (v > 1) throw SchemaError(group, std::string("\"") + key + "\" must be 0 or 1");
    return static_cast<std::uint32_t>(v);
}

RawFeatures from_json(const Json& j) {
    if (!j.is_object()) throw SchemaError("record", "expected a JSON object");
    RawFeatures raw;
    raw.sha256 = get_string(j, "sha256", "sha256");
    raw.appeared = get_string(j, "appeared", "appeared");
    {
        const auto& v = member(j, "label", "label");
        if (!v.is_number_integer()) throw SchemaError("label", "expected an integer");
        const auto label = v.get<std::int64_t>();
        if (label < -1 || label > 1) throw SchemaError("label", "expected -1, 0 or 1");
        raw.label = static_cast<int>(label);
    }

    const std::string general = "general";
    const auto& g = member(j, "general", general);
    raw.general.file_size = get_count(g, "file_size", general);
    raw.general.vsize = get_count(g, "vsize", general);
    raw.general.has_debug = get_flag(g, "has_debug", general);
    raw.general.exports = get_count(g, "exports", general);
    raw.general.imports = get_count(g, "imports", general);
    raw.general.has_relocations = get_flag(g, "has_relocations", general);
    raw.general.has_resources = get_flag(g, "has_resources", general);
    raw.general.has_signature = get_flag(g, "has_signature", general);
    raw.general.has_tls = get_flag(g, "has_tls", general);
    raw.general.symbols = get_count(g, "symbols", general);

    const std::string header = "header";
    const auto& h = member(j, "header", header);
    const auto& coff = member(h, "coff", header);
    raw.header.coff.timestamp = get_count(coff, "timestamp", header);
    raw.header.coff.machine = get_string(coff, "machine", header);
    raw.header.coff.characteristics =
        string_list(member(coff, "characteristics", header), header, "characteristics");
    const auto& opt = member(h, "optional", header);
    auto& o = raw.header.optional;
    o.subsystem = get_string(opt, "subsystem", header);
    o.dll_characteristics = string_list(member(opt, "dll_characteristics", header), header, "dll_characteristics");
    o.magic = get_string(opt, "magic", header);
    o.major_image_version = get_count(opt, "major_image_version", header);
    o.minor_image_version = get_count(opt, "minor_image_version", header);
    o.major_linker_version = get_count(opt, "major_linker_version", header);
    o.minor_linker_version = get_count(opt, "minor_linker_version", header);
    o.major_operating_system_version = get_count(opt, "major_operating_system_version", header);
    o.minor_operating_system_version = get_count(opt, "minor_operating_system_version", header);
    o.major_subsystem_version = get_count(opt, "major_subsystem_version", header);
    o.minor_subsystem_version = get_count(opt, "minor_subsystem_version", header);
    o.sizeof_code = get_count(opt, "sizeof_code", header);
    o.sizeof_headers = get_count(opt, "sizeof_headers", header);
    o.sizeof_heap_commit = get_count(opt, "sizeof_heap_commit", header);

    const auto& imports = member(j, "imports", "imports");
    if (!imports.is_object()) throw SchemaError("imports", "expected an object of library -> [functions]");
    for (const auto& [lib, functions] : imports.items()) {
        raw.imports.emplace_back(lib, string_list(functions, "imports", "function list"));
    }
    raw.exports = string_list(member(j, "exports", "exports"), "exports", "exports");

    const std::string section = "section";
    const auto& sec = member(j, "section", section);
    raw.section.entry = get_string(sec, "entry", section);
    const auto& list = member(sec, "sections", section);
    if (!list.is_array()) throw SchemaError(section, "\"sections\" must be an array");
    for (const auto& item : list) {
        SectionRecord rec;
        rec.name = get_string(item, "name", section);
        rec.size = get_count(item, "size", section);
        rec.entropy = get_real(item, "entropy", section);
        rec.vsize = get_count(item, "vsize", section);
        rec.props = string_list(member(item, "props", section), section, "props");
        raw.section.sections.push_back(std::move(rec));
    }

    raw.histogram = count_array<256>(member(j, "histogram", "histogram"), "histogram");
    raw.byteentropy = count_array<256>(member(j, "byteentropy", "byteentropy"), "byteentropy");

    const std::string strings = "strings";
    const auto& s = member(j, "strings", strings);
    raw.strings.numstrings = get_count(s, "numstrings", strings);
    raw.strings.avlength = get_real(s, "avlength", strings);
    raw.strings.printabledist = count_array<kPrintableBins>(member(s, "printabledist", strings), strings);
    raw.strings.printables = get_count(s, "printables", strings);
    raw.strings.entropy = get_real(s, "entropy", strings);
    raw.strings.paths = get_count(s, "paths", strings);
    raw.strings.urls = get_count(s, "urls", strings);
    raw.strings.registry = get_count(s, "registry", strings);
    raw.strings.MZ = get_count(s, "MZ", strings);

    validate(raw);
    return raw;
}

}  // namespace

std::string to_json_line(const RawFeatures& raw) {
    return to_json(raw).dump();
}

RawFeatures raw_from_json(std::string_view line) {
    Json j;
    try {
        j = Json::parse(line.begin(), line.end());
    } catch (const Json::parse_error& e) {
        throw SchemaError("record", std::string("malformed JSON: ") + e.what());
    }
    return from_json(j);
}

}  // namespace ember
