#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meanvc/tensor.hpp"

namespace meanvc {

struct ChunkSpec {
  std::size_t frames_per_chunk = 4;
  std::size_t history_k = 3;  // max preceding clean chunks visible
};

enum class ChunkRole : std::uint8_t { kClean, kNoisy };

// Fixed-length frame block, the unit of streaming generation.
struct MelChunk {
  Tensor frames;  // [frames_per_chunk, bins]
  int index = 0;
  ChunkRole role = ChunkRole::kClean;
};

// Frame-level attention permission matrix over a clean-then-noisy layout.
struct ChunkMask {
  std::size_t n_clean_chunks = 0;
  std::size_t n_noisy_chunks = 0;
  std::size_t frames_per_chunk = 0;
  std::size_t side = 0;                // total frame count
  std::vector<std::uint8_t> allow;     // side x side, row-major, 1 = permitted

  bool at(std::size_t row, std::size_t col) const {
    return allow[row * side + col] != 0;
  }
};

struct SegmentResult {
  std::vector<MelChunk> chunks;
  std::size_t pad = 0;  // zero frames appended to the last chunk
};

// Splits a [L, bins] frame sequence into fixed chunks, zero-padding the tail.
SegmentResult segment(const Tensor& frames, const ChunkSpec& spec);

// Mask over an arbitrary layout of clean chunk ids followed by noisy chunk
// ids. Clean chunks attend to themselves only; noisy chunk c attends to
// clean chunks with id in [c-K, c-1] present in the layout, and to itself.
ChunkMask build_layout_mask(const std::vector<int>& clean_ids,
                            const std::vector<int>& noisy_ids,
                            const ChunkSpec& spec);

// The training-time mask over the 2N-chunk clean-then-noisy layout.
ChunkMask build_chunk_mask(std::size_t n_chunks, const ChunkSpec& spec);

struct LayoutResult {
  Tensor frames;               // [(n_clean+n_noisy)*fpc, bins]
  std::vector<int> positions;  // per-frame rotary position ids
};

// Concatenates clean chunks before noisy chunks. Clean chunk c and noisy
// chunk c share the same positional range so streaming cache substitution
// stays position-consistent.
LayoutResult layout_sequence(const std::vector<MelChunk>& clean,
                             const std::vector<MelChunk>& noisy);

std::vector<int> frame_positions(const std::vector<int>& chunk_ids,
                                 std::size_t frames_per_chunk);

// Golden-test dump: one '0'/'1' line per mask row.
std::string dump_mask(const ChunkMask& mask);

}  // namespace meanvc
