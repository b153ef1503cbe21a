// Acceptance gate. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>

#include "ember/cli.hpp"
#include "ember/dataset_io.hpp"
#include "ember/eval_metrics.hpp"
#include "ember/gbdt.hpp"
#include "ember/hashing_vectorizer.hpp"
#include "ember/pe_parse.hpp"
#include "ember/raw_features.hpp"
#include "generators.hpp"
#include "json.hpp"
#include "pe_builder.hpp"
#include "test_util.hpp"

using namespace ember;
using namespace ember::testing;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void fail(const std::string& why) {
        if (pass) detail = why;
        pass = false;
    }
};

using Clock = std::chrono::steady_clock;

int g_failures = 0;

void criterion(const char* name, double time_limit_s, const std::function<Outcome()>& body) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o.fail(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    if (time_limit_s > 0 && secs >= time_limit_s) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "runtime %.2fs over the %.0fs limit", secs, time_limit_s);
        o.fail(buf);
    }
    if (!o.pass) ++g_failures;
    std::printf("%s  %-22s %7.2fs  %s\n", o.pass ? "PASS" : "FAIL", name, secs, o.detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c);
    return buf;
}

// ---------------------------------------------------------------------------

Outcome dimension_invariant() {
    Outcome o;
    Rng rng(1000);
    double worst = 0.0;
    std::size_t nonempty = 0;
    for (int i = 0; i < 1000; ++i) {
        const auto raw = random_record(rng);
        const auto v = vectorize(raw);
        if (v.values.size() != 2351 || v.view().size() != 2351) o.fail("vector length is not 2351");
        if (raw.general.file_size == 0) continue;
        ++nonempty;
        for (const auto& b : feature_layout()) {
            if (b.name != "histogram" && b.name != "byteentropy") continue;
            const auto& counts = b.name == "histogram" ? raw.histogram : raw.byteentropy;
            if (std::all_of(counts.begin(), counts.end(), [](auto c) { return c == 0; })) continue;
            double s = 0.0;
            for (std::size_t k = b.start; k < b.start + b.length; ++k) s += v.values[k];
            worst = std::max(worst, std::abs(s - 1.0));
        }
    }
    std::size_t total = 0;
    for (const auto& b : feature_layout()) total += b.length;
    if (total != 2351) o.fail("layout blocks do not sum to 2351");
    if (worst > 1e-6) o.fail(fmt("histogram block sum off by %.3g", worst));
    if (o.pass) o.detail = fmt("1000 records, %.0f nonempty, max |sum-1| = %.2g", double(nonempty), worst);
    return o;
}

/// Record carrying the published example's values wherever they are shown.
RawFeatures published_example() {
    RawFeatures r;
    r.sha256 = "000185977be72c8b007ac347b73ceb1ba3e5e4dae4fe98d4f2ea92250f7f580e";
    r.appeared = "2017-01";
    r.label = -1;
    r.general = {33334, 45056, 0, 0, 41, 1, 0, 0, 0, 0};
    r.header.coff = {1365446976, "I386", {"EXECUTABLE_IMAGE", "LARGE_ADDRESS_AWARE"}};
    r.header.optional = {"WINDOWS_CUI", {"DYNAMIC_BASE", "TERMINAL_SERVER_AWARE"}, "PE32", 1, 2, 11, 0, 6, 0, 6, 0,
                         3584, 1024, 4096};
    r.imports = {{"KERNEL32.dll", {"GetTickCount"}}};
    r.section.entry = ".text";
    r.section.sections = {{".text", 3584, 6.368472139761825, 3270, {"CNT_CODE", "MEM_EXECUTE", "MEM_READ"}}};
    r.histogram[0] = 3818;
    r.histogram[1] = 155;
    r.histogram[255] = 377;
    r.histogram[0x41] = 33334 - 3818 - 155 - 377;
    r.byteentropy[255] = 2943;
    auto& s = r.strings;
    s.numstrings = 170;
    s.avlength = 8.170588235294117;
    s.printabledist[0] = 15;
    s.printabledist[95] = 6;
    s.printabledist['a' - 0x20] = 1389 - 15 - 6;
    s.printables = 1389;
    s.entropy = 6.259255409240723;
    s.MZ = 1;
    return r;
}

void key_order(const nlohmann::ordered_json& j, const std::string& prefix, std::vector<std::string>& out) {
    if (j.is_object()) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            out.push_back(prefix + "/" + it.key());
            key_order(it.value(), prefix + "/" + it.key(), out);
        }
    } else if (j.is_array() && !j.empty() && j.front().is_object()) {
        key_order(j.front(), prefix + "/0", out);
    }
}

Outcome published_example_consistency() {
    Outcome o;
    const double numstrings = 170.0, avlength = 8.170588235294117, printables = 1389.0;
    const double product = numstrings * avlength;
    if (std::abs(product - printables) > 1e-9 * printables) o.fail(fmt("170 x avlength = %.17g", product));

    const auto raw = published_example();
    validate(raw);
    const auto line = to_json_line(raw);
    std::vector<std::string> got;
    key_order(nlohmann::ordered_json::parse(line), "", got);
    const std::vector<std::string> expected = {
        "/sha256", "/appeared", "/label", "/general", "/general/file_size", "/general/vsize", "/general/has_debug",
        "/general/exports", "/general/imports", "/general/has_relocations", "/general/has_resources",
        "/general/has_signature", "/general/has_tls", "/general/symbols", "/header", "/header/coff",
        "/header/coff/timestamp", "/header/coff/machine", "/header/coff/characteristics", "/header/optional",
        "/header/optional/subsystem", "/header/optional/dll_characteristics", "/header/optional/magic",
        "/header/optional/major_image_version", "/header/optional/minor_image_version",
        "/header/optional/major_linker_version", "/header/optional/minor_linker_version",
        "/header/optional/major_operating_system_version", "/header/optional/minor_operating_system_version",
        "/header/optional/major_subsystem_version", "/header/optional/minor_subsystem_version",
        "/header/optional/sizeof_code", "/header/optional/sizeof_headers", "/header/optional/sizeof_heap_commit",
        "/imports", "/imports/KERNEL32.dll", "/exports", "/section", "/section/entry", "/section/sections",
        "/section/sections/0/name", "/section/sections/0/size", "/section/sections/0/entropy",
        "/section/sections/0/vsize", "/section/sections/0/props", "/histogram", "/byteentropy", "/strings",
        "/strings/numstrings", "/strings/avlength", "/strings/printabledist", "/strings/printables",
        "/strings/entropy", "/strings/paths", "/strings/urls", "/strings/registry", "/strings/MZ"};
    if (got != expected) o.fail("serialized key order differs from the published layout");

    const auto back = raw_from_json(line);
    if (!(back == raw)) o.fail("published example does not round-trip");
    const auto j = nlohmann::json::parse(line);
    if (j["strings"]["avlength"].get<double>() != avlength ||
        j["section"]["sections"][0]["entropy"].get<double>() != 6.368472139761825 ||
        j["general"]["file_size"] != 33334 || j["header"]["coff"]["timestamp"] != 1365446976) {
        o.fail("published scalar values not reproduced");
    }
    if (o.pass) o.detail = fmt("170 x 8.170588235294117 = %.17g; %.0f keys in order", product, double(got.size()));
    return o;
}

// ---------------------------------------------------------------------------

ByteHistogram brute_force_byte_entropy(const std::vector<std::uint8_t>& b) {
    ByteHistogram out{};
    const std::size_t n = b.size();
    if (n == 0) return out;
    std::vector<std::pair<std::size_t, std::size_t>> windows;
    if (n < 2048) {
        windows.emplace_back(0, n);
    } else {
        for (std::size_t s = 0; s + 2048 <= n; s += 1024) windows.emplace_back(s, 2048);
    }
    for (const auto& [start, len] : windows) {
        std::array<std::uint64_t, 16> c{};
        for (std::size_t i = start; i < start + len; ++i) ++c[b[i] >> 4];
        double h = 0.0;
        for (auto k : c) {
            if (k == 0) continue;
            const double p = static_cast<double>(k) / static_cast<double>(len);
            h -= p * std::log2(p);
        }
        const double scaled = 2.0 * h;
        std::size_t row = static_cast<std::size_t>(std::floor(2.0 * scaled));
        if (row > 15) row = 15;
        for (std::size_t i = start; i < start + len; ++i) ++out[row * 16 + (b[i] >> 4)];
    }
    return out;
}

std::vector<std::uint8_t> varied_buffer(Rng& rng, std::size_t n) {
    switch (rng() % 4) {
        case 0: return random_bytes(rng, n);
        case 1: return random_text_like(rng, n);
        case 2: return std::vector<std::uint8_t>(n, static_cast<std::uint8_t>(rng()));
        default: {
            // Runs of a few symbols so windows spread over many entropy rows.
            std::vector<std::uint8_t> out(n);
            const unsigned alphabet = 1 + rng() % 16;
            for (auto& x : out) x = static_cast<std::uint8_t>((rng() % alphabet) << 4 | (rng() % 16));
            return out;
        }
    }
}

Outcome byte_entropy_oracle() {
    Outcome o;
    Rng rng(3000);
    std::array<bool, 16> rows_seen{};
    for (int i = 0; i < 200; ++i) {
        const std::size_t n = i == 0 ? 0 : rng() % (16 * 1024 + 1);
        const auto buf = varied_buffer(rng, n);
        const auto got = byte_entropy_histogram(buf);
        if (got != brute_force_byte_entropy(buf)) o.fail("mismatch on buffer " + std::to_string(i));
        for (std::size_t r = 0; r < 16; ++r) {
            for (std::size_t v = 0; v < 16; ++v) rows_seen[r] = rows_seen[r] || got[r * 16 + v] != 0;
        }
    }
    const auto zeros = byte_entropy_histogram(std::vector<std::uint8_t>(4096, 0));
    if (zeros[0] != 6144 || std::accumulate(zeros.begin(), zeros.end(), std::uint64_t{0}) != 6144) {
        o.fail("all-zero 4096-byte buffer does not put 6144 counts in cell (0,0)");
    }
    if (o.pass) {
        o.detail = "200 buffers exact; zero file cell(0,0) = 6144; rows hit: " +
                   std::to_string(std::count(rows_seen.begin(), rows_seen.end(), true)) + "/16";
    }
    return o;
}

// ---------------------------------------------------------------------------

bool printable(std::uint8_t c) {
    return c >= 0x20 && c <= 0x7f;
}

std::uint64_t count_at_every_offset(const std::vector<std::uint8_t>& b, std::string_view needle, bool fold) {
    std::uint64_t n = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        bool match = i + needle.size() <= b.size();
        for (std::size_t k = 0; match && k < needle.size(); ++k) {
            char c = static_cast<char>(b[i + k]);
            if (fold && c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
            match = c == needle[k];
        }
        n += match;
    }
    return n;
}

StringStats quadratic_string_stats(const std::vector<std::uint8_t>& b) {
    StringStats s;
    // For every offset that starts a run, walk to its end.
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (!printable(b[i]) || (i > 0 && printable(b[i - 1]))) continue;
        std::size_t j = i;
        while (j < b.size() && printable(b[j])) ++j;
        if (j - i < 5) continue;
        ++s.numstrings;
        for (std::size_t k = i; k < j; ++k) ++s.printabledist[b[k] - 0x20];
    }
    for (auto c : s.printabledist) s.printables += c;
    if (s.numstrings > 0) s.avlength = static_cast<double>(s.printables) / static_cast<double>(s.numstrings);
    if (s.printables > 0) {
        for (auto c : s.printabledist) {
            if (c == 0) continue;
            const double p = static_cast<double>(c) / static_cast<double>(s.printables);
            s.entropy -= p * std::log2(p);
        }
    }
    s.paths = count_at_every_offset(b, "c:\\", true);
    s.urls = count_at_every_offset(b, "http://", true) + count_at_every_offset(b, "https://", true);
    s.registry = count_at_every_offset(b, "HKEY_", false);
    s.MZ = count_at_every_offset(b, "MZ", false);
    return s;
}

Outcome string_oracle() {
    Outcome o;
    Rng rng(4000);
    std::uint64_t strings = 0, markers = 0;
    for (int i = 0; i < 500; ++i) {
        const std::size_t n = i == 0 ? 0 : rng() % (64 * 1024 + 1);
        const auto buf = rng() % 3 == 0 ? random_bytes(rng, n) : random_text_like(rng, n);
        const auto got = string_stats(buf);
        const auto want = quadratic_string_stats(buf);
        if (!(got == want)) o.fail("mismatch on buffer " + std::to_string(i));
        strings += want.numstrings;
        markers += want.paths + want.urls + want.registry + want.MZ;
    }
    if (o.pass) o.detail = fmt("500 buffers exact; %.0f strings, %.0f marker hits", double(strings), double(markers));
    return o;
}

// ---------------------------------------------------------------------------

Outcome parser_golden_and_fuzz() {
    Outcome o;
    const auto spec = minimal_pe_spec();
    const auto built = build_pe(spec);
    const auto pe = parse_pe(built.bytes);
    const auto expect = [&](bool ok, const char* what) {
        if (!ok) o.fail(std::string("golden field mismatch: ") + what);
    };
    expect(pe.ok(), "status");
    expect(pe.coff.machine_raw == spec.machine, "machine");
    expect(pe.coff.timestamp == spec.timestamp, "timestamp");
    expect(pe.coff.num_sections == spec.sections.size(), "section count");
    expect(pe.coff.num_symbols == spec.num_symbols, "symbols");
    expect(pe.coff.characteristics_raw == spec.coff_characteristics, "coff characteristics");
    expect(pe.optional.magic == "PE32", "magic");
    expect(pe.optional.subsystem_raw == spec.subsystem, "subsystem");
    expect(pe.optional.dll_characteristics_raw == spec.dll_characteristics, "dll characteristics");
    expect(pe.optional.major_linker_version == spec.major_linker, "major linker");
    expect(pe.optional.minor_linker_version == spec.minor_linker, "minor linker");
    expect(pe.optional.major_operating_system_version == spec.major_os, "major os");
    expect(pe.optional.minor_operating_system_version == spec.minor_os, "minor os");
    expect(pe.optional.major_image_version == spec.major_image, "major image");
    expect(pe.optional.minor_image_version == spec.minor_image, "minor image");
    expect(pe.optional.major_subsystem_version == spec.major_subsystem, "major subsystem");
    expect(pe.optional.minor_subsystem_version == spec.minor_subsystem, "minor subsystem");
    expect(pe.optional.sizeof_code == built.size_of_code, "sizeof code");
    expect(pe.optional.sizeof_headers == built.size_of_headers, "sizeof headers");
    expect(pe.optional.sizeof_heap_commit == spec.heap_commit, "heap commit");
    expect(pe.optional.sizeof_image == built.size_of_image, "sizeof image");
    expect(pe.optional.entry_point_rva == built.entry_rva, "entry rva");
    expect(pe.sections.size() == 1 && pe.sections[0].name == ".text", "sections");
    expect(pe.sections.size() == 1 && pe.sections[0].raw_offset == built.section_offsets[0], "raw offset");
    expect(pe.sections.size() == 1 && pe.sections[0].size == built.section_raw_sizes[0], "raw size");
    expect(pe.sections.size() == 1 && pe.sections[0].virtual_address == built.section_rvas[0], "section rva");
    expect(pe.imports == ImportTable{{"KERNEL32.dll", {"ExitProcess"}}}, "imports");
    expect(entry_section(pe) == ".text", "entry section");
    expect(built.bytes == read_bytes(data_dir() / "minimal_pe.bin"), "frozen fixture bytes");

    // Fuzz in a child process so a crash is reported rather than fatal.
    constexpr int kIterations = 10000;
    const pid_t child = fork();
    if (child < 0) {
        o.fail("fork failed");
        return o;
    }
    if (child == 0) {
        Rng rng(5000);
        std::vector<std::vector<std::uint8_t>> seeds = {built.bytes};
        for (int i = 0; i < 8; ++i) seeds.push_back(synthetic_pe(rng, i % 2 == 1));
        // Offsets of fields that steer the parser.
        const std::vector<std::size_t> fields = {0x3c, kPeOffset + 6, kPeOffset + 20, kOptionalOffset,
                                                 kOptionalOffset + 16, kOptionalOffset + 60, kOptionalOffset + 92,
                                                 kOptionalOffset + 96, kOptionalOffset + 100, kOptionalOffset + 104,
                                                 kOptionalOffset + 108, kSectionTableOffset + 8,
                                                 kSectionTableOffset + 12, kSectionTableOffset + 16,
                                                 kSectionTableOffset + 20, kSectionTableOffset + 48};
        const std::uint32_t extremes[] = {0, 1, 0x7f, 0x80, 0xff, 0xffff, 0x7fffffff, 0x80000000, 0xffffffff,
                                          0x1000, 0x200, 0x60};
        int bad = 0;
        for (int it = 0; it < kIterations; ++it) {
            auto b = seeds[rng() % seeds.size()];
            const int edits = 1 + static_cast<int>(rng() % 8);
            for (int e = 0; e < edits; ++e) {
                switch (rng() % 4) {
                    case 0: b[rng() % std::min<std::size_t>(b.size(), 0x400)] = static_cast<std::uint8_t>(rng()); break;
                    case 1: {
                        const std::size_t at = fields[rng() % fields.size()];
                        const std::uint32_t v = extremes[rng() % std::size(extremes)];
                        for (int k = 0; k < 4 && at + k < b.size(); ++k) b[at + k] = static_cast<std::uint8_t>(v >> (8 * k));
                        break;
                    }
                    case 2: b.resize(rng() % (b.size() + 1)); break;
                    default: b[rng() % b.size()] ^= static_cast<std::uint8_t>(1u << (rng() % 8)); break;
                }
                if (b.empty()) break;
            }
            try {
                const auto p = parse_pe(b);
                if (p.sections.size() > kMaxSections) ++bad;
                for (const auto& s : p.sections) {
                    if (!(s.entropy >= 0.0 && s.entropy <= 8.0) || s.size > b.size()) ++bad;
                }
                if (p.failed() && !(p.sections.empty() && p.imports.empty())) ++bad;
                if (!(parse_pe(b) == p)) ++bad;
                const auto raw = extract_raw(b, "2017-01", 1);
                vectorize(raw);
            } catch (...) {
                ++bad;
            }
        }
        _exit(bad == 0 ? 0 : 3);
    }
    int status = 0;
    waitpid(child, &status, 0);
    if (WIFSIGNALED(status)) {
        o.fail("fuzz child died with signal " + std::to_string(WTERMSIG(status)));
    } else if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        o.fail("fuzz found exceptions or invariant violations");
    }
    if (o.pass) o.detail = "golden fields match; 10000 mutated images, 0 crashes";
    return o;
}

// ---------------------------------------------------------------------------

Outcome hashing_determinism() {
    Outcome o;
    const auto g = nlohmann::json::parse(read_text(data_dir() / "hash_goldens.json"));
    std::size_t goldens = 0;
    for (const auto& v : g["known_vectors"]) {
        std::string data;
        for (unsigned char c : v[0].get<std::string>()) data.push_back(static_cast<char>(c));
        if (murmur3_32(data, v[1].get<std::uint32_t>()) != v[2].get<std::uint32_t>()) o.fail("published vector");
        ++goldens;
    }
    for (const auto& [token, value] : g["murmur3_seed0"].items()) {
        if (murmur3_32(token, 0) != value.get<std::uint32_t>()) o.fail("golden for \"" + token + "\"");
        ++goldens;
    }
    std::vector<WeightedToken> pairs;
    for (const auto& p : g["hash_pairs_256"]["pairs"]) pairs.emplace_back(p[0].get<std::string>(), p[1].get<double>());
    std::vector<double> expected(256, 0.0);
    for (const auto& [i, x] : g["hash_pairs_256"]["nonzero"].items()) expected[std::stoul(i)] = x.get<double>();
    if (hash_pairs(pairs, 256) != expected) o.fail("two-token hash_pairs golden");

    Rng rng(6000);
    for (int i = 0; i < 10000; ++i) {
        std::string token(1 + rng() % 40, ' ');
        for (auto& c : token) c = static_cast<char>(1 + rng() % 255);
        const double w = std::uniform_real_distribution<double>(0.001, 1000.0)(rng);
        const std::size_t bins = 1 + rng() % 2048;
        const std::vector<WeightedToken> one = {{token, w}};
        const auto h = hash_pairs(one, bins);
        std::size_t nonzero = 0;
        for (double x : h) {
            if (x == 0.0) continue;
            ++nonzero;
            if (std::abs(x) != w) o.fail("magnitude differs from weight");
        }
        if (nonzero != 1) o.fail("token touched " + std::to_string(nonzero) + " buckets");
    }
    if (o.pass) o.detail = std::to_string(goldens) + " murmur goldens; 10000 single-token sketches one-hot";
    return o;
}

// ---------------------------------------------------------------------------

Outcome gbdt_criterion() {
    Outcome o;
    Rng rng(7000);
    const auto data = make_blobs(rng, 2000, 20);
    gbdt::TrainParams params;  // defaults: 100 trees, 31 leaves
    std::vector<double> losses;
    const auto model = gbdt::train(data.x, data.y, params, [&](int, double loss) { losses.push_back(loss); });
    if (model.trees.size() != 100) o.fail("expected 100 trees");
    for (const auto& t : model.trees) {
        if (t.leaf_count() > 31) o.fail("tree exceeds 31 leaves");
    }
    for (std::size_t i = 1; i < losses.size(); ++i) {
        if (losses[i] > losses[i - 1]) o.fail(fmt("log-loss rose at round %.0f", double(i)));
    }

    std::vector<double> scores;
    for (std::uint64_t i = 0; i < data.x.rows; ++i) {
        const auto row = data.x.row(i);
        const double m = model.margin(row);
        if (std::bit_cast<std::uint64_t>(m) != std::bit_cast<std::uint64_t>(tree_walk_margin(model, row))) {
            o.fail("prediction differs from the tree-walk oracle");
        }
        scores.push_back(gbdt::predict_proba(model, row));
    }
    const double train_auc = auc(roc_curve(scores, data.y));
    if (train_auc < 0.99) o.fail(fmt("training AUC %.6f < 0.99", train_auc));

    TempDir tmp;
    gbdt::save_model(model, tmp / "model.json");
    const auto loaded = gbdt::load_model(tmp / "model.json");
    const auto probe = make_blobs(rng, 100, 20);
    for (std::uint64_t i = 0; i < probe.x.rows; ++i) {
        const double a = gbdt::predict_proba(model, probe.x.row(i));
        const double b = gbdt::predict_proba(loaded, probe.x.row(i));
        if (std::bit_cast<std::uint64_t>(a) != std::bit_cast<std::uint64_t>(b)) o.fail("save/load changed a prediction");
    }
    if (o.pass) {
        o.detail = fmt("n=2000 d=20: AUC %.6f, log-loss %.4g -> %.4g, oracle and reload exact", train_auc,
                       losses.front(), losses.back());
    }
    return o;
}

Outcome auc_oracle() {
    Outcome o;
    Rng rng(8000);
    double worst = 0.0;
    for (int set = 0; set < 50; ++set) {
        const std::size_t n = 2 + rng() % 999;
        std::vector<double> s(n);
        std::vector<std::int8_t> y(n);
        const bool coarse = set % 2 == 0;
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = static_cast<std::int8_t>(rng() % 2);
            s[i] = coarse ? static_cast<double>(rng() % 20) : std::uniform_real_distribution<double>(0, 1)(rng);
        }
        y[0] = 0;
        y[1] = 1;
        double wins = 0.0, pairs = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (y[i] != 1) continue;
            for (std::size_t j = 0; j < n; ++j) {
                if (y[j] != 0) continue;
                pairs += 1.0;
                wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
            }
        }
        worst = std::max(worst, std::abs(auc(roc_curve(s, y)) - wins / pairs));
    }
    if (worst > 1e-12) o.fail(fmt("max |AUC - concordance| = %.3g", worst));
    if (o.pass) o.detail = fmt("50 sets, max |AUC - concordance| = %.2g", worst);
    return o;
}

// ---------------------------------------------------------------------------

int cli(const std::vector<std::string>& args, std::string* out = nullptr) {
    std::ostringstream o, e;
    const int code = cli::run(args, o, e);
    if (out) *out = o.str();
    if (code != 0) std::fprintf(stderr, "ember %s failed (%d): %s\n", args[0].c_str(), code, e.str().c_str());
    return code;
}

struct PipelineResult {
    bool ok = false;
    double auc = 0.0;
    std::vector<std::vector<std::uint8_t>> artifacts;
};

PipelineResult run_pipeline(const std::filesystem::path& corpus, const std::filesystem::path& work, unsigned jobs,
                            std::size_t per_class) {
    PipelineResult r;
    std::filesystem::create_directories(work);
    const auto j = std::to_string(jobs);
    const auto p = [&](const char* name) { return (work / name).string(); };
    std::vector<std::string> artifact_names;

    // Even-numbered samples train, odd-numbered samples are held out.
    for (const char* split : {"train", "test"}) {
        for (int label : {0, 1}) {
            std::vector<std::string> args = {"extract"};
            for (std::size_t i = (std::string(split) == "train" ? 0 : 1); i < per_class; i += 2) {
                args.push_back((corpus / ((label ? "mal_" : "ben_") + std::to_string(i) + ".exe")).string());
            }
            const std::string out = std::string(split) + "_" + std::to_string(label) + ".jsonl";
            args.insert(args.end(), {"--appeared", "2017-0" + std::to_string(1 + label), "--label",
                                     std::to_string(label), "--out", p(out.c_str()), "--jobs", j});
            if (cli(args) != 0) return r;
            artifact_names.push_back(out);
        }
        const std::string s(split);
        if (cli({"vectorize", p((s + "_0.jsonl").c_str()), p((s + "_1.jsonl").c_str()), "--out",
                 p((s + ".embv").c_str()), "--labels", p((s + ".embl").c_str()), "--ids", p((s + ".ids").c_str()),
                 "--jobs", j}) != 0) {
            return r;
        }
        for (const char* ext : {".embv", ".embl", ".ids"}) artifact_names.push_back(s + ext);
    }
    if (cli({"train", p("train.embv"), p("train.embl"), "--out", p("model.json"), "--jobs", j}) != 0) return r;
    if (cli({"predict", p("model.json"), p("test.embv"), "--ids", p("test.ids"), "--out", p("scores.csv")}) != 0) {
        return r;
    }
    std::string printed;
    if (cli({"evaluate", p("scores.csv"), p("test.embl"), "--fpr", "0.001,0.01,0.1", "--out", p("report.json")},
            &printed) != 0) {
        return r;
    }
    artifact_names.insert(artifact_names.end(), {"model.json", "scores.csv", "report.json"});
    for (const auto& name : artifact_names) r.artifacts.push_back(read_bytes(work / name));
    r.artifacts.push_back({printed.begin(), printed.end()});
    if (printed.rfind("auc ", 0) != 0) return r;
    r.auc = std::stod(printed.substr(4));
    r.ok = true;
    return r;
}

Outcome end_to_end() {
    Outcome o;
    TempDir tmp;
    const auto corpus = tmp / "corpus";
    std::filesystem::create_directories(corpus);
    constexpr std::size_t kPerClass = 100;
    Rng rng(9000);
    for (std::size_t i = 0; i < kPerClass; ++i) {
        write_bytes(corpus / ("ben_" + std::to_string(i) + ".exe"), synthetic_pe(rng, false));
        write_bytes(corpus / ("mal_" + std::to_string(i) + ".exe"), synthetic_pe(rng, true));
    }
    const auto one = run_pipeline(corpus, tmp / "jobs1", 1, kPerClass);
    const auto eight = run_pipeline(corpus, tmp / "jobs8", 8, kPerClass);
    if (!one.ok || !eight.ok) {
        o.fail("a pipeline stage exited non-zero");
        return o;
    }
    if (one.auc < 0.9) o.fail(fmt("held-out AUC %.4f < 0.9", one.auc));
    if (one.artifacts != eight.artifacts) o.fail("--jobs 1 and --jobs 8 artifacts differ");
    if (o.pass) {
        o.detail = fmt("200 PEs, held-out AUC %.4f; %.0f artifacts byte-identical across --jobs 1/8", one.auc,
                       double(one.artifacts.size()));
    }
    return o;
}

}  // namespace

int main() {
    criterion("dimension-invariant", 10, dimension_invariant);
    criterion("published-example", 0, published_example_consistency);
    criterion("byte-entropy-oracle", 30, byte_entropy_oracle);
    criterion("string-oracle", 0, string_oracle);
    criterion("parser-golden-fuzz", 0, parser_golden_and_fuzz);
    criterion("hashing-determinism", 0, hashing_determinism);
    criterion("gbdt", 60, gbdt_criterion);
    criterion("auc-oracle", 0, auc_oracle);
    criterion("end-to-end", 300, end_to_end);
    std::printf("%s: %d failing criteria\n", g_failures == 0 ? "ACCEPTED" : "REJECTED", g_failures);
    return g_failures == 0 ? 0 : 1;
}
