#include "hsae/shards.hpp"

#include <algorithm>
#include <filesystem>
#include <random>
#include <stdexcept>

#include "hsae/binary_io.hpp"
#include "hsae/errors.hpp"

namespace hsae {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[5] = "HACT";

void write_header(std::ostream& os, std::uint32_t d, std::uint64_t rows) {
    io::put_magic(os, kMagic);
    io::put_le<std::uint32_t>(os, kShardVersion);
    io::put_le<std::uint32_t>(os, d);
    io::put_le<std::uint64_t>(os, rows);
    io::put_le<std::uint8_t>(os, 0);
}

ShardHeader parse_header(std::istream& is, const std::string& path) {
    if (!io::check_magic(is, kMagic)) throw FormatError(path + ": bad magic, not an activation shard");
    ShardHeader h;
    h.version = io::get_le<std::uint32_t>(is, path);
    if (h.version != kShardVersion) {
        throw FormatError(path + ": unsupported shard version " + std::to_string(h.version));
    }
    h.d = io::get_le<std::uint32_t>(is, path);
    h.row_count = io::get_le<std::uint64_t>(is, path);
    h.dtype = io::get_le<std::uint8_t>(is, path);
    if (h.dtype != 0) throw FormatError(path + ": unsupported dtype " + std::to_string(h.dtype));
    return h;
}

}  // namespace

ShardHeader read_shard_header(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error(path + ": cannot open shard");
    const ShardHeader h = parse_header(is, path);
    std::error_code ec;
    const auto size = fs::file_size(path, ec);
    if (ec) throw std::runtime_error(path + ": cannot stat shard: " + ec.message());
    const auto expected = kShardHeaderBytes + h.row_count * h.d * sizeof(float);
    if (size != expected) {
        throw CorruptionError(path + ": header claims " + std::to_string(h.row_count) + " rows of d=" +
                              std::to_string(h.d) + " (" + std::to_string(expected) + " bytes), file has " +
                              std::to_string(size) + " bytes");
    }
    return h;
}

void write_shard(const std::string& path, const RowMat<float>& X) {
    if (!X.allFinite()) throw std::invalid_argument(path + ": refusing to write non-finite activations");
    if (X.cols() > (Index{1} << 31)) throw std::invalid_argument(path + ": d exceeds 2^31");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error(path + ": cannot open for writing");
    write_header(os, static_cast<std::uint32_t>(X.cols()), static_cast<std::uint64_t>(X.rows()));
    io::put_f32_block(os, X.data(), static_cast<std::size_t>(X.size()));
    os.flush();
    if (!os) throw std::runtime_error(path + ": write failed");
}

RowMat<float> read_shard(const std::string& path) {
    const ShardHeader h = read_shard_header(path);
    std::ifstream is(path, std::ios::binary);
    is.seekg(static_cast<std::streamoff>(kShardHeaderBytes));
    RowMat<float> X(static_cast<Index>(h.row_count), static_cast<Index>(h.d));
    io::get_f32_block(is, X.data(), static_cast<std::size_t>(X.size()), path);
    return X;
}

// ---------------------------------------------------------------------------

ShardWriter::ShardWriter(const std::string& path, std::uint32_t d) : path_(path), d_(d) {
    os_.open(path, std::ios::binary | std::ios::trunc);
    if (!os_) throw std::runtime_error(path + ": cannot open for writing");
    write_header(os_, d_, 0);
    open_ = true;
}

ShardWriter::~ShardWriter() {
    if (open_) {
        try {
            close();
        } catch (...) {
        }
    }
}

void ShardWriter::append(const float* row) { append_rows(row, 1); }

void ShardWriter::append_rows(const float* rows, std::uint64_t n) {
    io::put_f32_block(os_, rows, static_cast<std::size_t>(n * d_));
    rows_ += n;
}

void ShardWriter::close() {
    if (!open_) return;
    open_ = false;
    os_.seekp(12);
    io::put_le<std::uint64_t>(os_, rows_);
    os_.close();
    if (!os_) throw std::runtime_error(path_ + ": write failed");
}

// ---------------------------------------------------------------------------

void shuffle_shards(const std::vector<std::string>& in_paths, const std::vector<std::string>& out_paths,
                    std::uint64_t seed, const ShuffleOptions& opts) {
    if (in_paths.empty() || out_paths.empty()) throw std::invalid_argument("shuffle_shards: empty path list");
    std::vector<ShardHeader> headers;
    for (const auto& p : in_paths) headers.push_back(read_shard_header(p));
    const std::uint32_t d = headers.front().d;
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < headers.size(); ++i) {
        if (headers[i].d != d) {
            throw std::invalid_argument("shuffle_shards: " + in_paths[i] + " has d=" + std::to_string(headers[i].d) +
                                        ", expected " + std::to_string(d));
        }
        total += headers[i].row_count;
    }

    const std::size_t row_bytes = std::size_t{d} * sizeof(float);
    const std::size_t budget = std::max<std::size_t>(opts.memory_budget_bytes, row_bytes);
    const std::uint64_t buckets = std::max<std::uint64_t>(1, (total * row_bytes + budget - 1) / budget * 2);

    const fs::path tmp = opts.tmp_dir.empty() ? fs::absolute(out_paths.front()).parent_path() : fs::path(opts.tmp_dir);
    std::mt19937_64 rng(seed);

    // Pass 1: scatter rows to bucket files.
    std::vector<fs::path> bucket_paths;
    {
        std::vector<std::unique_ptr<ShardWriter>> writers;
        for (std::uint64_t b = 0; b < buckets; ++b) {
            bucket_paths.push_back(tmp / (".hsae_shuffle_" + std::to_string(seed) + "_" + std::to_string(b) + ".tmp"));
            writers.push_back(std::make_unique<ShardWriter>(bucket_paths.back().string(), d));
        }
        std::uniform_int_distribution<std::uint64_t> pick(0, buckets - 1);
        constexpr std::uint64_t kChunk = 4096;
        std::vector<float> chunk;
        for (std::size_t s = 0; s < in_paths.size(); ++s) {
            std::ifstream is(in_paths[s], std::ios::binary);
            is.seekg(static_cast<std::streamoff>(kShardHeaderBytes));
            for (std::uint64_t r = 0; r < headers[s].row_count; r += kChunk) {
                const std::uint64_t n = std::min(kChunk, headers[s].row_count - r);
                chunk.resize(static_cast<std::size_t>(n * d));
                io::get_f32_block(is, chunk.data(), chunk.size(), in_paths[s]);
                for (std::uint64_t i = 0; i < n; ++i) writers[pick(rng)]->append(chunk.data() + i * d);
            }
        }
        for (auto& w : writers) w->close();
    }

    // Pass 2: shuffle each bucket in memory, stream to outputs.
    const std::uint64_t n_out = out_paths.size();
    std::size_t out_index = 0;
    auto quota = [&](std::size_t i) { return total / n_out + (i < total % n_out ? 1 : 0); };
    auto writer = std::make_unique<ShardWriter>(out_paths[0], d);
    for (const auto& bp : bucket_paths) {
        RowMat<float> rows = read_shard(bp.string());
        fs::remove(bp);
        std::vector<std::uint64_t> order(static_cast<std::size_t>(rows.rows()));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(order[i - 1], order[pick(rng)]);
        }
        for (auto r : order) {
            while (writer->rows() >= quota(out_index)) {
                writer->close();
                writer = std::make_unique<ShardWriter>(out_paths[++out_index], d);
            }
            writer->append(rows.row(static_cast<Index>(r)).data());
        }
    }
    writer->close();
    while (++out_index < out_paths.size()) ShardWriter(out_paths[out_index], d).close();
}

// ---------------------------------------------------------------------------

BatchStream::BatchStream(std::vector<std::string> paths, Index batch_size)
    : paths_(std::move(paths)), batch_size_(batch_size) {
    if (batch_size_ < 1) throw std::invalid_argument("BatchStream: batch_size must be >= 1");
    if (paths_.empty()) throw std::invalid_argument("BatchStream: no shards");
    for (const auto& p : paths_) {
        const ShardHeader h = read_shard_header(p);
        if (d_ == 0) d_ = static_cast<Index>(h.d);
        if (static_cast<Index>(h.d) != d_) {
            throw std::invalid_argument("BatchStream: " + p + " has d=" + std::to_string(h.d) + ", expected " +
                                        std::to_string(d_));
        }
        rows_.push_back(h.row_count);
        total_rows_ += h.row_count;
    }
    seek(0);
}

void BatchStream::open_shard(std::size_t shard, std::uint64_t row) {
    shard_ = shard;
    row_ = row;
    is_.close();
    is_.clear();
    if (shard_ >= paths_.size()) return;
    is_.open(paths_[shard_], std::ios::binary);
    if (!is_) throw std::runtime_error(paths_[shard_] + ": cannot open shard");
    is_.seekg(static_cast<std::streamoff>(kShardHeaderBytes + row_ * static_cast<std::uint64_t>(d_) * sizeof(float)));
}

void BatchStream::seek(std::uint64_t batch_index) {
    next_batch_ = batch_index;
    std::uint64_t row = batch_index * static_cast<std::uint64_t>(batch_size_);
    std::size_t shard = 0;
    while (shard < rows_.size() && row >= rows_[shard]) row -= rows_[shard++];
    open_shard(shard, row);
}

bool BatchStream::next(RowMat<float>& out) {
    if (next_batch_ >= batches_per_epoch()) return false;
    out.resize(batch_size_, d_);
    Index filled = 0;
    while (filled < batch_size_) {
        while (shard_ < paths_.size() && row_ >= rows_[shard_]) open_shard(shard_ + 1, 0);
        if (shard_ >= paths_.size()) throw CorruptionError("BatchStream: ran out of rows before the end of the epoch");
        const auto take = static_cast<Index>(std::min<std::uint64_t>(rows_[shard_] - row_,
                                                                     static_cast<std::uint64_t>(batch_size_ - filled)));
        io::get_f32_block(is_, out.row(filled).data(), static_cast<std::size_t>(take * d_), paths_[shard_]);
        row_ += static_cast<std::uint64_t>(take);
        filled += take;
    }
    ++next_batch_;
    return true;
}

}  // namespace hsae
