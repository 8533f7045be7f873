#include "meanvc/chunking.hpp"

#include <stdexcept>

namespace meanvc {

SegmentResult segment(const Tensor& frames, const ChunkSpec& spec) {
  if (frames.rows() == 0 || frames.size() == 0) {
    throw std::invalid_argument("segment: empty frame sequence");
  }
  if (spec.frames_per_chunk == 0) {
    throw std::invalid_argument("segment: frames_per_chunk must be >= 1");
  }
  const std::size_t fpc = spec.frames_per_chunk;
  const std::size_t len = frames.rows();
  const std::size_t bins = frames.cols();
  const std::size_t n_chunks = (len + fpc - 1) / fpc;

  SegmentResult result;
  result.pad = n_chunks * fpc - len;
  result.chunks.reserve(n_chunks);
  for (std::size_t c = 0; c < n_chunks; ++c) {
    MelChunk chunk;
    chunk.index = static_cast<int>(c);
    chunk.role = ChunkRole::kClean;
    chunk.frames = Tensor({fpc, bins});
    for (std::size_t f = 0; f < fpc; ++f) {
      const std::size_t src = c * fpc + f;
      if (src >= len) break;  // trailing rows stay zero
      for (std::size_t b = 0; b < bins; ++b)
        chunk.frames.at(f, b) = frames.at(src, b);
    }
    result.chunks.push_back(std::move(chunk));
  }
  return result;
}

ChunkMask build_layout_mask(const std::vector<int>& clean_ids,
                            const std::vector<int>& noisy_ids,
                            const ChunkSpec& spec) {
  if (spec.history_k == 0) {
    throw std::invalid_argument("build_layout_mask: K must be >= 1");
  }
  if (noisy_ids.empty()) {
    throw std::invalid_argument("build_layout_mask: no noisy chunks");
  }
  const std::size_t fpc = spec.frames_per_chunk;
  const std::size_t nc = clean_ids.size();
  const std::size_t nn = noisy_ids.size();
  const std::size_t n_chunks = nc + nn;
  const int k = static_cast<int>(spec.history_k);

  // Chunk-level permissions first; frame blocks inherit them.
  std::vector<std::uint8_t> chunk_allow(n_chunks * n_chunks, 0);
  auto role_of = [&](std::size_t c) {
    return c < nc ? ChunkRole::kClean : ChunkRole::kNoisy;
  };
  auto id_of = [&](std::size_t c) {
    return c < nc ? clean_ids[c] : noisy_ids[c - nc];
  };
  for (std::size_t row = 0; row < n_chunks; ++row) {
    for (std::size_t col = 0; col < n_chunks; ++col) {
      const ChunkRole rr = role_of(row), cr = role_of(col);
      const int rid = id_of(row), cid = id_of(col);
      bool ok = false;
      if (rr == ChunkRole::kClean) {
        ok = cr == ChunkRole::kClean && rid == cid;
      } else if (cr == ChunkRole::kNoisy) {
        ok = rid == cid;
      } else {
        ok = cid >= rid - k && cid <= rid - 1;
      }
      chunk_allow[row * n_chunks + col] = ok ? 1 : 0;
    }
  }

  ChunkMask mask;
  mask.n_clean_chunks = nc;
  mask.n_noisy_chunks = nn;
  mask.frames_per_chunk = fpc;
  mask.side = n_chunks * fpc;
  mask.allow.assign(mask.side * mask.side, 0);
  for (std::size_t row = 0; row < mask.side; ++row) {
    const std::size_t crow = row / fpc;
    for (std::size_t col = 0; col < mask.side; ++col) {
      mask.allow[row * mask.side + col] = chunk_allow[crow * n_chunks + col / fpc];
    }
  }
  return mask;
}

ChunkMask build_chunk_mask(std::size_t n_chunks, const ChunkSpec& spec) {
  if (n_chunks == 0) {
    throw std::invalid_argument("build_chunk_mask: N must be >= 1");
  }
  std::vector<int> ids(n_chunks);
  for (std::size_t i = 0; i < n_chunks; ++i) ids[i] = static_cast<int>(i);
  return build_layout_mask(ids, ids, spec);
}

std::vector<int> frame_positions(const std::vector<int>& chunk_ids,
                                 std::size_t frames_per_chunk) {
  std::vector<int> pos;
  pos.reserve(chunk_ids.size() * frames_per_chunk);
  for (int id : chunk_ids)
    for (std::size_t f = 0; f < frames_per_chunk; ++f)
      pos.push_back(id * static_cast<int>(frames_per_chunk) +
                    static_cast<int>(f));
  return pos;
}

LayoutResult layout_sequence(const std::vector<MelChunk>& clean,
                             const std::vector<MelChunk>& noisy) {
  if (clean.size() != noisy.size() || clean.empty()) {
    throw std::invalid_argument("layout_sequence: need equal nonempty lists");
  }
  const std::size_t fpc = clean[0].frames.rows();
  const std::size_t bins = clean[0].frames.cols();
  for (const auto& list : {clean, noisy}) {
    for (const MelChunk& c : list) {
      if (c.frames.rows() != fpc || c.frames.cols() != bins) {
        throw std::invalid_argument("layout_sequence: nonuniform chunk shape");
      }
    }
  }
  const std::size_t n = clean.size();
  LayoutResult out;
  out.frames = Tensor({2 * n * fpc, bins});
  std::vector<int> ids;
  ids.reserve(2 * n);
  std::size_t row = 0;
  for (const auto* list : {&clean, &noisy}) {
    for (const MelChunk& c : *list) {
      ids.push_back(c.index);
      for (std::size_t f = 0; f < fpc; ++f, ++row)
        for (std::size_t b = 0; b < bins; ++b)
          out.frames.at(row, b) = c.frames.at(f, b);
    }
  }
  out.positions = frame_positions(ids, fpc);
  return out;
}

std::string dump_mask(const ChunkMask& mask) {
  std::string out;
  out.reserve(mask.side * (mask.side + 1));
  for (std::size_t r = 0; r < mask.side; ++r) {
    for (std::size_t c = 0; c < mask.side; ++c)
      out.push_back(mask.at(r, c) ? '1' : '0');
    out.push_back('\n');
  }
  return out;
}

}  // namespace meanvc
