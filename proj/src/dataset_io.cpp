#include "ember/dataset_io.hpp"

#include <bit>
#include <cstring>

#include "ember/parallel.hpp"
#include "json.hpp"

namespace ember {

namespace fs = std::filesystem;

namespace {

constexpr char kMatrixMagic[4] = {'E', 'M', 'B', 'V'};
constexpr char kLabelMagic[4] = {'E', 'M', 'B', 'L'};
constexpr std::uint64_t kMatrixHeaderSize = 4 + 4 + 8 + 4;
constexpr std::uint64_t kLabelHeaderSize = 4 + 4 + 8;

template <typename T>
void put_le(std::string& buf, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        buf.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
    }
}

template <typename T>
T get_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return static_cast<T>(v);
}

std::string describe(const fs::path& path, std::size_t line, const std::string& sha256) {
    std::string out = path.string() + ":" + std::to_string(line);
    if (!sha256.empty()) out += " (sha256 " + sha256 + ")";
    return out;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    return out;
}

std::ifstream open_in(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return in;
}

std::string sha256_hint(const std::string& line) {
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_object()) {
        auto it = j.find("sha256");
        if (it != j.end() && it->is_string()) return it->get<std::string>();
    }
    return {};
}

}  // namespace

// ---------------------------------------------------------------------------
// JSON lines

JsonlReader::JsonlReader(const fs::path& path) : path_(path), in_(open_in(path)) {}

std::optional<JsonlEntry> JsonlReader::next() {
    std::string line;
    while (std::getline(in_, line)) {
        ++line_;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        try {
            return JsonlEntry{line_, raw_from_json(line)};
        } catch (const SchemaError& e) {
            return JsonlEntry{line_, LineError{e.what(), e.group(), sha256_hint(line)}};
        }
    }
    if (in_.bad()) throw DataError("read error in " + path_.string());
    return std::nullopt;
}

JsonlWriter::JsonlWriter(const fs::path& path) : path_(path), out_(open_out(path)) {}

void JsonlWriter::write(const RawFeatures& raw) {
    write_line(to_json_line(raw));
}

void JsonlWriter::write_line(const std::string& json_line) {
    out_ << json_line << '\n';
    if (!out_) throw DataError("write error in " + path_.string());
}

void JsonlWriter::close() {
    out_.close();
    if (out_.fail()) throw DataError("cannot close " + path_.string());
}

std::vector<JsonlEntry> read_jsonl(const fs::path& path) {
    JsonlReader reader(path);
    std::vector<JsonlEntry> out;
    while (auto entry = reader.next()) out.push_back(std::move(*entry));
    return out;
}

void write_jsonl(const fs::path& path, std::span<const RawFeatures> records) {
    JsonlWriter writer(path);
    for (const auto& r : records) writer.write(r);
    writer.close();
}

// ---------------------------------------------------------------------------
// Statistics

void LabelCounts::add(int label) noexcept {
    if (label == 1) ++malicious;
    else if (label == 0) ++benign;
    else ++unlabeled;
}

void DatasetStats::add(const RawFeatures& raw) {
    ++total;
    labels.add(raw.label);
    months[raw.appeared].add(raw.label);
}

std::string DatasetStats::to_json() const {
    using Json = nlohmann::ordered_json;
    const auto counts = [](const LabelCounts& c) {
        return Json{{"malicious", c.malicious}, {"benign", c.benign}, {"unlabeled", c.unlabeled},
                    {"total", c.total()}};
    };
    Json j;
    j["total"] = total;
    j["labels"] = counts(labels);
    Json by_month = Json::object();
    for (const auto& [month, c] : months) by_month[month] = counts(c);
    j["months"] = std::move(by_month);
    return j.dump(2);
}

DatasetStats dataset_stats(std::span<const fs::path> shards) {
    DatasetStats stats;
    for (const auto& shard : shards) {
        JsonlReader reader(shard);
        while (auto entry = reader.next()) {
            if (!entry->ok()) {
                throw DataError(describe(shard, entry->line, entry->error().sha256) + ": " + entry->error().message);
            }
            stats.add(entry->record());
        }
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Binary matrices

MatrixWriter::MatrixWriter(const fs::path& path, std::uint32_t cols)
    : path_(path), out_(open_out(path)), cols_(cols) {
    std::string header(kMatrixMagic, 4);
    put_le<std::uint32_t>(header, kMatrixFormatVersion);
    put_le<std::uint64_t>(header, 0);
    put_le<std::uint32_t>(header, cols_);
    out_.write(header.data(), static_cast<std::streamsize>(header.size()));
    if (!out_) throw DataError("write error in " + path_.string());
}

MatrixWriter::~MatrixWriter() {
    try {
        finish();
    } catch (...) {
    }
}

void MatrixWriter::append(std::span<const float> row) {
    if (finished_) throw std::logic_error("MatrixWriter: append after finish");
    if (row.size() != cols_) {
        throw DataError("row has " + std::to_string(row.size()) + " values, matrix has " + std::to_string(cols_) +
                        " columns");
    }
    std::string buf;
    buf.reserve(4 * row.size());
    for (float v : row) put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(v));
    out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out_) throw DataError("write error in " + path_.string());
    ++rows_;
}

void MatrixWriter::finish() {
    if (finished_) return;
    finished_ = true;
    std::string rows;
    put_le<std::uint64_t>(rows, rows_);
    out_.seekp(8);
    out_.write(rows.data(), static_cast<std::streamsize>(rows.size()));
    out_.close();
    if (out_.fail()) throw DataError("write error in " + path_.string());
}

LabelWriter::LabelWriter(const fs::path& path) : path_(path), out_(open_out(path)) {
    std::string header(kLabelMagic, 4);
    put_le<std::uint32_t>(header, kMatrixFormatVersion);
    put_le<std::uint64_t>(header, 0);
    out_.write(header.data(), static_cast<std::streamsize>(header.size()));
    if (!out_) throw DataError("write error in " + path_.string());
}

LabelWriter::~LabelWriter() {
    try {
        finish();
    } catch (...) {
    }
}

void LabelWriter::append(std::int8_t label) {
    if (finished_) throw std::logic_error("LabelWriter: append after finish");
    out_.put(static_cast<char>(label));
    if (!out_) throw DataError("write error in " + path_.string());
    ++rows_;
}

void LabelWriter::finish() {
    if (finished_) return;
    finished_ = true;
    std::string rows;
    put_le<std::uint64_t>(rows, rows_);
    out_.seekp(8);
    out_.write(rows.data(), static_cast<std::streamsize>(rows.size()));
    out_.close();
    if (out_.fail()) throw DataError("write error in " + path_.string());
}

namespace {

/// Reads a fixed header and checks the file length matches the payload.
std::vector<unsigned char> read_header(std::ifstream& in, const fs::path& path, const char (&magic)[4],
                                       std::uint64_t header_size) {
    std::vector<unsigned char> header(header_size);
    in.read(reinterpret_cast<char*>(header.data()), static_cast<std::streamsize>(header_size));
    if (static_cast<std::uint64_t>(in.gcount()) != header_size) {
        throw DataError(path.string() + ": truncated header");
    }
    if (std::memcmp(header.data(), magic, 4) != 0) {
        throw DataError(path.string() + ": bad magic, expected " + std::string(magic, 4));
    }
    const auto version = get_le<std::uint32_t>(header.data() + 4);
    if (version != kMatrixFormatVersion) {
        throw DataError(path.string() + ": unsupported format version " + std::to_string(version));
    }
    return header;
}

void check_payload(const fs::path& path, std::uint64_t header_size, std::uint64_t rows, std::uint64_t row_bytes) {
    const auto size = fs::file_size(path);
    if (row_bytes != 0 && rows > (size - header_size) / row_bytes) {
        throw DataError(path.string() + ": truncated payload (" + std::to_string(rows) + " rows declared)");
    }
    if (size != header_size + rows * row_bytes) {
        throw DataError(path.string() + ": payload size does not match header");
    }
}

}  // namespace

MatrixHeader read_matrix_header(const fs::path& path) {
    auto in = open_in(path);
    const auto header = read_header(in, path, kMatrixMagic, kMatrixHeaderSize);
    return MatrixHeader{get_le<std::uint64_t>(header.data() + 8), get_le<std::uint32_t>(header.data() + 16)};
}

Matrix read_matrix(const fs::path& path) {
    auto in = open_in(path);
    const auto header = read_header(in, path, kMatrixMagic, kMatrixHeaderSize);
    Matrix m;
    m.rows = get_le<std::uint64_t>(header.data() + 8);
    m.cols = get_le<std::uint32_t>(header.data() + 16);
    check_payload(path, kMatrixHeaderSize, m.rows, 4ull * m.cols);

    const std::uint64_t count = m.rows * m.cols;
    std::vector<unsigned char> payload(4 * count);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (static_cast<std::uint64_t>(in.gcount()) != payload.size()) {
        throw DataError(path.string() + ": truncated payload");
    }
    m.data.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        m.data[i] = std::bit_cast<float>(get_le<std::uint32_t>(payload.data() + 4 * i));
    }
    return m;
}

void write_matrix(const fs::path& path, const Matrix& m) {
    if (m.data.size() != m.rows * m.cols) throw std::invalid_argument("write_matrix: data size mismatch");
    MatrixWriter writer(path, m.cols);
    for (std::uint64_t i = 0; i < m.rows; ++i) writer.append(m.row(i));
    writer.finish();
}

std::vector<std::int8_t> read_labels(const fs::path& path) {
    auto in = open_in(path);
    const auto header = read_header(in, path, kLabelMagic, kLabelHeaderSize);
    const auto rows = get_le<std::uint64_t>(header.data() + 8);
    check_payload(path, kLabelHeaderSize, rows, 1);
    std::vector<std::int8_t> labels(rows);
    in.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(rows));
    if (static_cast<std::uint64_t>(in.gcount()) != rows) throw DataError(path.string() + ": truncated payload");
    return labels;
}

void write_labels(const fs::path& path, std::span<const std::int8_t> labels) {
    LabelWriter writer(path);
    for (auto l : labels) writer.append(l);
    writer.finish();
}

// ---------------------------------------------------------------------------
// Vectorization into matrices

namespace {

struct PendingRow {
    RawFeatures record;
    const fs::path* shard;
    std::size_t line;
};

}  // namespace

std::uint64_t to_matrix(std::span<const fs::path> shards, const fs::path& matrix_path,
                        const fs::path& labels_path, const MatrixOptions& options) {
    MatrixWriter matrix(matrix_path, static_cast<std::uint32_t>(kFeatureDim));
    LabelWriter labels(labels_path);
    std::optional<std::ofstream> ids;
    if (options.ids_path) ids.emplace(open_out(*options.ids_path));

    std::vector<PendingRow> batch;
    std::vector<FeatureVector> vectors;
    const std::size_t batch_size = std::max<std::size_t>(1, options.batch_size);

    const auto flush = [&] {
        vectors.assign(batch.size(), FeatureVector{});
        std::vector<std::string> errors(batch.size());
        parallel_for(batch.size(), options.jobs, [&](std::size_t i) {
            try {
                vectors[i] = vectorize(batch[i].record);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        });
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const auto& row = batch[i];
            if (!errors[i].empty()) {
                throw DataError(describe(*row.shard, row.line, row.record.sha256) + ": " + errors[i]);
            }
            matrix.append(vectors[i].view());
            labels.append(static_cast<std::int8_t>(row.record.label));
            if (ids) *ids << row.record.sha256 << '\n';
        }
        batch.clear();
    };

    for (const auto& shard : shards) {
        JsonlReader reader(shard);
        while (auto entry = reader.next()) {
            if (!entry->ok()) {
                throw DataError(describe(shard, entry->line, entry->error().sha256) + ": " + entry->error().message);
            }
            if (entry->record().label == -1 && !options.include_unlabeled) continue;
            batch.push_back(PendingRow{std::move(std::get<RawFeatures>(entry->value)), &shard, entry->line});
            if (batch.size() >= batch_size) flush();
        }
    }
    flush();

    const auto rows = matrix.rows();
    matrix.finish();
    labels.finish();
    if (ids) {
        ids->close();
        if (ids->fail()) throw DataError("write error in " + options.ids_path->string());
    }
    return rows;
}

}  // namespace ember
