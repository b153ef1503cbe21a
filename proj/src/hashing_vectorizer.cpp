#include "ember/hashing_vectorizer.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace ember {

namespace {

constexpr std::array<Block, 8> kLayout = [] {
    std::array<Block, 8> blocks{{
        {"general", 0, layout::kGeneral},
        {"header", 0, layout::kHeader},
        {"imports", 0, layout::kImports},
        {"exports", 0, layout::kExports},
        {"section", 0, layout::kSections},
        {"histogram", 0, layout::kHistogram},
        {"byteentropy", 0, layout::kByteEntropy},
        {"strings", 0, layout::kStrings},
    }};
    std::size_t start = 0;
    for (auto& b : blocks) {
        b.start = start;
        start += b.length;
    }
    return blocks;
}();

static_assert(kLayout.back().start + kLayout.back().length == kFeatureDim);

std::uint32_t rotl(std::uint32_t x, int r) noexcept {
    return (x << r) | (x >> (32 - r));
}

std::string ascii_lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) {
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    }
    return out;
}

/// Writes values sequentially into the double-precision staging buffer.
class Cursor {
public:
    explicit Cursor(std::span<double> out) : out_(out) {}

    void put(double v) { out_[pos_++] = v; }

    std::span<double> take(std::size_t n) {
        auto s = out_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    void hash_strings(const std::vector<std::string>& tokens, std::size_t bins) {
        auto dst = take(bins);
        for (const auto& t : tokens) {
            if (!t.empty()) hash_into(t, 1.0, dst);
        }
    }

    void hash_string(const std::string& token, std::size_t bins) {
        auto dst = take(bins);
        if (!token.empty()) hash_into(token, 1.0, dst);
    }

    template <std::size_t N>
    void normalized(const std::array<std::uint64_t, N>& counts) {
        double total = 0.0;
        for (auto c : counts) total += static_cast<double>(c);
        for (auto c : counts) put(total > 0.0 ? static_cast<double>(c) / total : 0.0);
    }

    std::size_t position() const noexcept { return pos_; }

private:
    std::span<double> out_;
    std::size_t pos_ = 0;
};

bool has_prop(const std::vector<std::string>& props, std::string_view p) {
    return std::find(props.begin(), props.end(), p) != props.end();
}

}  // namespace

std::span<const Block> feature_layout() noexcept {
    return kLayout;
}

std::string layout_manifest_json() {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& b : kLayout) j[std::string(b.name)] = {b.start, b.length};
    return j.dump();
}

std::uint32_t murmur3_32(std::span<const std::uint8_t> data, std::uint32_t seed) noexcept {
    constexpr std::uint32_t c1 = 0xcc9e2d51;
    constexpr std::uint32_t c2 = 0x1b873593;
    const std::size_t len = data.size();
    const std::size_t nblocks = len / 4;
    std::uint32_t h = seed;

    for (std::size_t i = 0; i < nblocks; ++i) {
        const auto* p = data.data() + 4 * i;
        std::uint32_t k = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
        k *= c1;
        k = rotl(k, 15);
        k *= c2;
        h ^= k;
        h = rotl(h, 13);
        h = h * 5 + 0xe6546b64;
    }

    const auto* tail = data.data() + 4 * nblocks;
    std::uint32_t k = 0;
    switch (len & 3) {
        case 3: k ^= static_cast<std::uint32_t>(tail[2]) << 16; [[fallthrough]];
        case 2: k ^= static_cast<std::uint32_t>(tail[1]) << 8; [[fallthrough]];
        case 1:
            k ^= tail[0];
            k *= c1;
            k = rotl(k, 15);
            k *= c2;
            h ^= k;
    }

    h ^= static_cast<std::uint32_t>(len);
    h ^= h >> 16;
    h *= 0x85ebca6b;
    h ^= h >> 13;
    h *= 0xc2b2ae35;
    h ^= h >> 16;
    return h;
}

std::uint32_t murmur3_32(std::string_view data, std::uint32_t seed) noexcept {
    return murmur3_32(std::span(reinterpret_cast<const std::uint8_t*>(data.data()), data.size()), seed);
}

void hash_into(std::string_view token, double weight, std::span<double> bins) noexcept {
    if (bins.empty()) return;
    const auto h = static_cast<std::int32_t>(murmur3_32(token, 0));
    const auto magnitude = static_cast<std::uint64_t>(std::abs(static_cast<std::int64_t>(h)));
    const auto index = static_cast<std::size_t>(magnitude % bins.size());
    bins[index] += h < 0 ? -weight : weight;
}

std::vector<double> hash_pairs(std::span<const WeightedToken> pairs, std::size_t bins) {
    if (bins == 0) throw std::invalid_argument("hash_pairs: bins must be >= 1");
    std::vector<double> out(bins, 0.0);
    for (const auto& [token, weight] : pairs) hash_into(token, weight, out);
    return out;
}

FeatureVector vectorize(const RawFeatures& raw) {
    validate(raw);

    std::array<double, kFeatureDim> staging{};
    Cursor out(staging);

    const auto& g = raw.general;
    for (double v : {double(g.file_size), double(g.vsize), double(g.has_debug), double(g.exports),
                     double(g.imports), double(g.has_relocations), double(g.has_resources),
                     double(g.has_signature), double(g.has_tls), double(g.symbols)}) {
        out.put(v);
    }

    const auto& coff = raw.header.coff;
    const auto& opt = raw.header.optional;
    out.put(static_cast<double>(coff.timestamp));
    out.hash_string(coff.machine, layout::kHeaderStringBins);
    out.hash_strings(coff.characteristics, layout::kHeaderStringBins);
    out.hash_string(opt.subsystem, layout::kHeaderStringBins);
    out.hash_strings(opt.dll_characteristics, layout::kHeaderStringBins);
    out.hash_string(opt.magic, layout::kHeaderStringBins);
    for (auto v : {opt.major_image_version, opt.minor_image_version, opt.major_linker_version,
                   opt.minor_linker_version, opt.major_operating_system_version,
                   opt.minor_operating_system_version, opt.major_subsystem_version,
                   opt.minor_subsystem_version, opt.sizeof_code, opt.sizeof_headers,
                   opt.sizeof_heap_commit}) {
        out.put(static_cast<double>(v));
    }

    {
        std::set<std::string> libraries;
        for (const auto& [lib, functions] : raw.imports) libraries.insert(ascii_lower(lib));
        auto lib_bins = out.take(layout::kLibraryBins);
        for (const auto& lib : libraries) {
            if (!lib.empty()) hash_into(lib, 1.0, lib_bins);
        }
        auto fn_bins = out.take(layout::kFunctionBins);
        for (const auto& [lib, functions] : raw.imports) {
            const auto prefix = ascii_lower(lib) + ":";
            for (const auto& fn : functions) hash_into(prefix + fn, 1.0, fn_bins);
        }
    }

    out.hash_strings(raw.exports, layout::kExportBins);

    {
        const auto& sections = raw.section.sections;
        double zero_size = 0, empty_name = 0, read_execute = 0, writable = 0;
        for (const auto& s : sections) {
            zero_size += s.size == 0;
            empty_name += s.name.empty();
            read_execute += has_prop(s.props, "MEM_READ") && has_prop(s.props, "MEM_EXECUTE");
            writable += has_prop(s.props, "MEM_WRITE");
        }
        out.put(static_cast<double>(sections.size()));
        out.put(zero_size);
        out.put(empty_name);
        out.put(read_execute);
        out.put(writable);

        auto sizes = out.take(layout::kSectionBins);
        auto entropies = out.take(layout::kSectionBins);
        auto vsizes = out.take(layout::kSectionBins);
        for (const auto& s : sections) {
            if (s.name.empty()) continue;
            hash_into(s.name, static_cast<double>(s.size), sizes);
            hash_into(s.name, s.entropy, entropies);
            hash_into(s.name, static_cast<double>(s.vsize), vsizes);
        }

        out.hash_string(raw.section.entry, layout::kSectionBins);
        static const std::vector<std::string> kNoProps;
        const auto* entry_props = &kNoProps;
        if (!raw.section.entry.empty()) {
            auto it = std::find_if(sections.begin(), sections.end(),
                                   [&](const SectionRecord& s) { return s.name == raw.section.entry; });
            if (it != sections.end()) entry_props = &it->props;
        }
        out.hash_strings(*entry_props, layout::kSectionBins);
    }

    out.normalized(raw.histogram);
    out.normalized(raw.byteentropy);

    const auto& st = raw.strings;
    out.put(static_cast<double>(st.numstrings));
    out.put(st.avlength);
    for (auto c : st.printabledist) {
        out.put(st.printables > 0 ? static_cast<double>(c) / static_cast<double>(st.printables) : 0.0);
    }
    out.put(static_cast<double>(st.printables));
    out.put(st.entropy);
    out.put(static_cast<double>(st.paths));
    out.put(static_cast<double>(st.urls));
    out.put(static_cast<double>(st.registry));
    out.put(static_cast<double>(st.MZ));

    if (out.position() != kFeatureDim) throw std::logic_error("vectorize: layout size mismatch");

    FeatureVector fv;
    std::transform(staging.begin(), staging.end(), fv.values.begin(),
                   [](double v) { return static_cast<float>(v); });
    return fv;
}

}  // namespace ember
