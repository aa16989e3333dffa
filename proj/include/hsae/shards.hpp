#ifndef HSAE_SHARDS_HPP
#define HSAE_SHARDS_HPP

// Activation shards on disk.
//
// Layout (little-endian):
//   offset  0  char[4]  magic "HACT"
//   offset  4  u32      version (1)
//   offset  8  u32      d
//   offset 12  u64      row_count
//   offset 20  u8       dtype (0 = f32)
//   offset 21  f32[row_count * d] row-major payload

#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "hsae/linalg.hpp"

namespace hsae {

inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderBytes = 21;

struct ShardHeader {
    std::uint32_t version = kShardVersion;
    std::uint32_t d = 0;
    std::uint64_t row_count = 0;
    std::uint8_t dtype = 0;
};

/// Reads and validates a header, including that the file size matches it.
ShardHeader read_shard_header(const std::string& path);

void write_shard(const std::string& path, const RowMat<float>& X);
RowMat<float> read_shard(const std::string& path);

/// Appends rows to a shard whose row count is patched in on close().
class ShardWriter {
public:
    ShardWriter(const std::string& path, std::uint32_t d);
    ~ShardWriter();
    ShardWriter(const ShardWriter&) = delete;
    ShardWriter& operator=(const ShardWriter&) = delete;

    void append(const float* row);
    void append_rows(const float* rows, std::uint64_t n);
    void close();
    std::uint64_t rows() const { return rows_; }

private:
    std::string path_;
    std::uint32_t d_;
    std::uint64_t rows_ = 0;
    std::ofstream os_;
    bool open_ = false;
};

struct ShuffleOptions {
    std::size_t memory_budget_bytes = std::size_t{128} << 20;  ///< per-bucket working set
    std::string tmp_dir;  ///< defaults to the directory of the first output
};

/// Two-pass external shuffle: rows are scattered to random bucket files, then
/// each bucket is shuffled in memory and streamed to the outputs in order.
/// Output i receives floor(N / n_out) rows, plus one for i < N % n_out.
void shuffle_shards(const std::vector<std::string>& in_paths, const std::vector<std::string>& out_paths,
                    std::uint64_t seed, const ShuffleOptions& opts = {});

/// Fixed-size batches over a list of shards in order. The trailing partial
/// batch of an epoch is dropped.
class BatchStream {
public:
    BatchStream(std::vector<std::string> paths, Index batch_size);

    Index d() const { return d_; }
    Index batch_size() const { return batch_size_; }
    std::uint64_t total_rows() const { return total_rows_; }
    std::uint64_t batches_per_epoch() const { return total_rows_ / static_cast<std::uint64_t>(batch_size_); }

    /// Positions the cursor at the start of batch `index` within the epoch.
    void seek(std::uint64_t batch_index);
    /// Fills `out` with the next batch; false at the end of the epoch.
    bool next(RowMat<float>& out);

private:
    void open_shard(std::size_t shard, std::uint64_t row);

    std::vector<std::string> paths_;
    std::vector<std::uint64_t> rows_;
    Index batch_size_;
    Index d_ = 0;
    std::uint64_t total_rows_ = 0;
    std::uint64_t next_batch_ = 0;
    std::size_t shard_ = 0;
    std::uint64_t row_ = 0;
    std::ifstream is_;
};

}  // namespace hsae

#endif  // HSAE_SHARDS_HPP
