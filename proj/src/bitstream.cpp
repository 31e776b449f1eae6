#include "lfkm/bitstream.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <queue>
#include <string>

#include "lfkm/error.hpp"
#include "lfkm/model.hpp"
#include "lfkm/rng.hpp"

namespace lfkm::bitstream {

namespace {

constexpr std::uint8_t kFlagAllocate = 0x01;
constexpr std::uint8_t kFlagDecompose = 0x02;
constexpr std::uint8_t kFlagRaw = 0x04;
constexpr std::uint8_t kFlagDecoderK3 = 0x08;
constexpr std::uint8_t kKnownFlags = kFlagAllocate | kFlagDecompose | kFlagRaw | kFlagDecoderK3;

struct Writer {
  std::vector<std::uint8_t> bytes;

  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u16(std::uint16_t v) {
    bytes.push_back(static_cast<std::uint8_t>(v));
    bytes.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void raw(const std::uint8_t* data, std::size_t size) {
    bytes.insert(bytes.end(), data, data + size);
  }
};

struct Reader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;

  void need(std::size_t k) const {
    if (pos + k > size) throw Error("model file is truncated");
  }
  std::uint8_t u8() {
    need(1);
    return data[pos++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(data[pos] | (data[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  const std::uint8_t* raw(std::size_t k) {
    need(k);
    const std::uint8_t* p = data + pos;
    pos += k;
    return p;
  }
};

struct CodeSet {
  std::vector<std::uint64_t> code;  // per symbol, valid when length > 0
  int max_len = 0;
};

// canonical code assignment: (length, symbol) order, numerically increasing
CodeSet canonical_codes(const HuffmanTable& table) {
  CodeSet cs;
  cs.code.assign(table.lengths.size(), 0);
  std::vector<std::uint32_t> order;
  for (std::uint32_t s = 0; s < table.lengths.size(); ++s)
    if (table.lengths[s] > 0) order.push_back(s);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    return table.lengths[a] != table.lengths[b] ? table.lengths[a] < table.lengths[b] : a < b;
  });
  std::uint64_t code = 0;
  int prev_len = order.empty() ? 0 : table.lengths[order[0]];
  for (std::uint32_t s : order) {
    const int len = table.lengths[s];
    code <<= (len - prev_len);
    cs.code[s] = code;
    ++code;
    prev_len = len;
    cs.max_len = std::max(cs.max_len, len);
  }
  return cs;
}

void check_kraft(const HuffmanTable& table) {
  // exact arithmetic in 2^-64 units; a complete code sums to exactly one
  unsigned __int128 sum = 0;
  const unsigned __int128 one = static_cast<unsigned __int128>(1) << 64;
  bool any = false;
  for (std::uint8_t len : table.lengths) {
    if (len == 0) continue;
    if (len > 64) throw Error("invalid code-length table (length exceeds 64 bits)");
    any = true;
    sum += one >> len;
    if (sum > one) throw Error("invalid code-length table (Kraft violation)");
  }
  if (!any) throw Error("invalid code-length table (no symbols)");
}

std::uint8_t config_flags(const model::NetworkConfig& c, bool raw) {
  std::uint8_t flags = 0;
  if (c.allocate_modulators) flags |= kFlagAllocate;
  if (c.decompose_kernels) flags |= kFlagDecompose;
  if (raw) flags |= kFlagRaw;
  if (c.decoder_k3) flags |= kFlagDecoderK3;
  return flags;
}

void write_affine(Writer& w, const quantizer::Affine16& q) {
  w.f32(q.lo);
  w.f32(q.hi);
  for (std::uint16_t code : q.codes) w.u16(code);
}

quantizer::Affine16 read_affine(Reader& r, std::size_t count) {
  quantizer::Affine16 q;
  q.lo = r.f32();
  q.hi = r.f32();
  if (!std::isfinite(q.lo) || !std::isfinite(q.hi) || q.lo > q.hi)
    throw Error("invalid quantization range");
  q.codes.resize(count);
  for (auto& code : q.codes) code = r.u16();
  return q;
}

}  // namespace

HuffmanTable huffman_build(const std::vector<std::uint64_t>& freqs) {
  if (freqs.empty()) throw Error("huffman: empty alphabet");
  const std::size_t n = freqs.size();
  HuffmanTable table;
  table.lengths.assign(n, 0);

  std::vector<std::uint32_t> active;
  for (std::uint32_t s = 0; s < n; ++s)
    if (freqs[s] > 0) active.push_back(s);
  if (active.empty()) throw Error("huffman: all frequencies are zero");
  if (active.size() == 1) {
    table.lengths[active[0]] = 1;
    return table;
  }

  struct Node {
    std::uint64_t weight;
    std::uint64_t id;  // symbol for leaves, n+counter for internal nodes
    std::int64_t parent = -1;
  };
  std::vector<Node> nodes;
  nodes.reserve(2 * active.size());
  for (std::uint32_t s : active) nodes.push_back({freqs[s], s});

  using Entry = std::pair<std::pair<std::uint64_t, std::uint64_t>, std::size_t>;  // ((w,id), node)
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  for (std::size_t i = 0; i < nodes.size(); ++i) heap.push({{nodes[i].weight, nodes[i].id}, i});

  std::uint64_t next_id = n;
  while (heap.size() > 1) {
    const auto a = heap.top();
    heap.pop();
    const auto b = heap.top();
    heap.pop();
    Node parent{nodes[a.second].weight + nodes[b.second].weight, next_id++};
    nodes.push_back(parent);
    const std::size_t pi = nodes.size() - 1;
    nodes[a.second].parent = static_cast<std::int64_t>(pi);
    nodes[b.second].parent = static_cast<std::int64_t>(pi);
    heap.push({{parent.weight, parent.id}, pi});
  }

  for (std::size_t i = 0; i < active.size(); ++i) {
    int depth = 0;
    std::int64_t p = nodes[i].parent;
    while (p >= 0) {
      ++depth;
      p = nodes[static_cast<std::size_t>(p)].parent;
    }
    table.lengths[active[i]] = static_cast<std::uint8_t>(depth);
  }
  return table;
}

std::vector<std::uint8_t> huffman_encode(const HuffmanTable& table,
                                         const std::vector<std::uint32_t>& symbols,
                                         std::uint64_t& bit_count) {
  const CodeSet cs = canonical_codes(table);
  std::vector<std::uint8_t> out;
  std::uint64_t bits = 0;
  std::uint8_t cur = 0;
  int fill = 0;
  for (std::uint32_t s : symbols) {
    if (s >= table.lengths.size() || table.lengths[s] == 0)
      throw Error("huffman: symbol outside the coded alphabet");
    const int len = table.lengths[s];
    const std::uint64_t code = cs.code[s];
    for (int b = len - 1; b >= 0; --b) {
      cur = static_cast<std::uint8_t>((cur << 1) | ((code >> b) & 1));
      if (++fill == 8) {
        out.push_back(cur);
        cur = 0;
        fill = 0;
      }
    }
    bits += static_cast<std::uint64_t>(len);
  }
  if (fill > 0) out.push_back(static_cast<std::uint8_t>(cur << (8 - fill)));
  bit_count = bits;
  return out;
}

std::vector<std::uint32_t> huffman_decode(const HuffmanTable& table, const std::uint8_t* data,
                                          std::size_t size, std::uint64_t bit_count) {
  check_kraft(table);
  if (bit_count > size * 8ULL) throw Error("model stream is truncated");

  const int max_len = *std::max_element(table.lengths.begin(), table.lengths.end());
  std::vector<std::uint32_t> sorted;
  for (std::uint32_t s = 0; s < table.lengths.size(); ++s)
    if (table.lengths[s] > 0) sorted.push_back(s);
  std::stable_sort(sorted.begin(), sorted.end(), [&](std::uint32_t a, std::uint32_t b) {
    return table.lengths[a] != table.lengths[b] ? table.lengths[a] < table.lengths[b] : a < b;
  });
  std::vector<std::uint64_t> count(static_cast<std::size_t>(max_len) + 1, 0);
  for (std::uint32_t s : sorted) ++count[table.lengths[s]];
  std::vector<std::uint64_t> first_code(static_cast<std::size_t>(max_len) + 1, 0);
  std::vector<std::uint64_t> first_index(static_cast<std::size_t>(max_len) + 1, 0);
  {
    std::uint64_t code = 0, index = 0;
    for (int len = 1; len <= max_len; ++len) {
      code <<= 1;
      first_code[static_cast<std::size_t>(len)] = code;
      first_index[static_cast<std::size_t>(len)] = index;
      code += count[static_cast<std::size_t>(len)];
      index += count[static_cast<std::size_t>(len)];
    }
  }

  std::vector<std::uint32_t> out;
  std::uint64_t code = 0;
  int len = 0;
  for (std::uint64_t bit = 0; bit < bit_count; ++bit) {
    const std::uint8_t byte = data[bit >> 3];
    code = (code << 1) | ((byte >> (7 - (bit & 7))) & 1);
    ++len;
    if (len > max_len) throw Error("invalid code in model stream");
    const std::uint64_t cnt = count[static_cast<std::size_t>(len)];
    if (cnt > 0 && code >= first_code[static_cast<std::size_t>(len)] &&
        code - first_code[static_cast<std::size_t>(len)] < cnt) {
      out.push_back(sorted[first_index[static_cast<std::size_t>(len)] +
                           (code - first_code[static_cast<std::size_t>(len)])]);
      code = 0;
      len = 0;
    }
  }
  if (len != 0) throw Error("model stream is truncated");
  return out;
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < size; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

std::vector<std::uint8_t> serialize(const quantizer::QuantizedModel& qm) {
  const model::NetworkConfig& c = qm.config;
  c.validate();
  if (c.X > 65535 || c.Y > 65535) throw Error("serialize: spatial extents exceed the format");
  if (c.U > 255 || c.V > 255) throw Error("serialize: angular extents exceed the format");
  if (c.c_m > 65535 || c.c_d > 65535) throw Error("serialize: channel counts exceed the format");
  if (c.r > 255) throw Error("serialize: rank exceeds the format");
  if (c.n > 65536) throw Error("serialize: codebook size exceeds the format");

  Writer w;
  w.raw(reinterpret_cast<const std::uint8_t*>("LFKM"), 4);
  w.u8(kFormatVersion);
  w.u16(static_cast<std::uint16_t>(c.X));
  w.u16(static_cast<std::uint16_t>(c.Y));
  w.u8(static_cast<std::uint8_t>(c.U));
  w.u8(static_cast<std::uint8_t>(c.V));
  w.u16(static_cast<std::uint16_t>(c.c_m));
  w.u16(static_cast<std::uint16_t>(c.c_d));
  w.u8(static_cast<std::uint8_t>(c.r));
  w.u16(static_cast<std::uint16_t>(c.n == 65536 ? 0 : c.n));
  w.u8(static_cast<std::uint8_t>(c.output_activation));
  w.u8(config_flags(c, qm.raw));
  w.u8(kPrngSplitMix64);
  w.u64(c.seed);
  if (w.bytes.size() != kHeaderBytes) throw Error("serialize: header layout broke");

  if (qm.raw) {
    const auto expected = static_cast<std::size_t>(model::param_count(c).total);
    if (qm.raw_values.size() != expected)
      throw Error("serialize: raw payload size does not match the configuration");
    for (float v : qm.raw_values) w.f32(v);
  } else {
    const std::size_t per_layer = quantizer::layer_value_count(c);
    for (int q = 0; q < model::kLayers; ++q) {
      const quantizer::QuantizedLayer& ql = qm.layers[static_cast<std::size_t>(q)];
      if (ql.centroids.size() != static_cast<std::size_t>(c.n))
        throw Error("serialize: layer codebook size does not match the configuration");
      if (ql.indices.size() != per_layer)
        throw Error("serialize: layer index count does not match the configuration");
      for (float centroid : ql.centroids) w.f32(centroid);
      std::vector<std::uint64_t> freqs(static_cast<std::size_t>(c.n), 0);
      for (std::uint32_t idx : ql.indices) {
        if (idx >= static_cast<std::uint32_t>(c.n)) throw Error("serialize: index out of codebook range");
        ++freqs[idx];
      }
      const HuffmanTable table = huffman_build(freqs);
      for (std::uint8_t len : table.lengths) w.u8(len);
      std::uint64_t bit_count = 0;
      const std::vector<std::uint8_t> stream = huffman_encode(table, ql.indices, bit_count);
      w.u64(bit_count);
      w.raw(stream.data(), stream.size());
    }
    if (c.decompose_kernels) {
      if (qm.bases.codes.size() != static_cast<std::size_t>(9 * c.r))
        throw Error("serialize: basis payload size does not match the configuration");
      write_affine(w, qm.bases);
    }
    const std::size_t decoder_count =
        static_cast<std::size_t>(c.decoder_k() * c.decoder_k() * c.channels() * 3 + 3);
    if (qm.decoder.codes.size() != decoder_count)
      throw Error("serialize: decoder payload size does not match the configuration");
    write_affine(w, qm.decoder);
  }

  w.u32(crc32(w.bytes.data(), w.bytes.size()));
  return w.bytes;
}

quantizer::QuantizedModel deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeaderBytes + 4) throw Error("model file is truncated");
  const std::uint32_t stored_crc = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                                   (static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8) |
                                   (static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16) |
                                   (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
  if (crc32(bytes.data(), bytes.size() - 4) != stored_crc)
    throw Error("model file is corrupted (checksum mismatch)");

  Reader r{bytes.data(), bytes.size() - 4};
  if (std::memcmp(r.raw(4), "LFKM", 4) != 0) throw Error("not a model file (bad magic)");
  if (r.u8() != kFormatVersion) throw Error("unsupported model version");

  quantizer::QuantizedModel qm;
  model::NetworkConfig& c = qm.config;
  c.X = r.u16();
  c.Y = r.u16();
  c.U = r.u8();
  c.V = r.u8();
  c.c_m = r.u16();
  c.c_d = r.u16();
  c.r = r.u8();
  const std::uint16_t n_raw = r.u16();
  c.n = n_raw == 0 ? 65536 : n_raw;
  const std::uint8_t outact = r.u8();
  if (outact > 1) throw Error("unknown output activation id");
  c.output_activation = static_cast<model::OutputAct>(outact);
  const std::uint8_t flags = r.u8();
  if (flags & static_cast<std::uint8_t>(~kKnownFlags)) throw Error("unrecognized flag bits");
  c.allocate_modulators = (flags & kFlagAllocate) != 0;
  c.decompose_kernels = (flags & kFlagDecompose) != 0;
  qm.raw = (flags & kFlagRaw) != 0;
  c.decoder_k3 = (flags & kFlagDecoderK3) != 0;
  if (r.u8() != kPrngSplitMix64) throw Error("unsupported noise generator id");
  c.seed = r.u64();
  c.validate();

  if (qm.raw) {
    const auto expected = static_cast<std::size_t>(model::param_count(c).total);
    qm.raw_values.resize(expected);
    for (auto& v : qm.raw_values) {
      v = r.f32();
      if (!std::isfinite(v)) throw Error("non-finite model parameter");
    }
  } else {
    const std::size_t per_layer = quantizer::layer_value_count(c);
    for (int q = 0; q < model::kLayers; ++q) {
      quantizer::QuantizedLayer& ql = qm.layers[static_cast<std::size_t>(q)];
      ql.centroids.resize(static_cast<std::size_t>(c.n));
      for (auto& centroid : ql.centroids) {
        centroid = r.f32();
        if (!std::isfinite(centroid)) throw Error("non-finite codebook entry");
      }
      HuffmanTable table;
      table.lengths.resize(static_cast<std::size_t>(c.n));
      for (auto& len : table.lengths) len = r.u8();
      const std::uint64_t bit_count = r.u64();
      const std::size_t stream_bytes = static_cast<std::size_t>((bit_count + 7) / 8);
      const std::uint8_t* stream = r.raw(stream_bytes);
      ql.indices = huffman_decode(table, stream, stream_bytes, bit_count);
      if (ql.indices.size() != per_layer)
        throw Error("layer index count does not match the configuration");
    }
    if (c.decompose_kernels) qm.bases = read_affine(r, static_cast<std::size_t>(9 * c.r));
    const std::size_t decoder_count =
        static_cast<std::size_t>(c.decoder_k() * c.decoder_k() * c.channels() * 3 + 3);
    qm.decoder = read_affine(r, decoder_count);
  }

  if (r.pos != r.size) throw Error("model file has trailing bytes");
  return qm;
}

double compute_bpp(std::size_t byte_count, int X, int Y, int U, int V) {
  return 8.0 * static_cast<double>(byte_count) /
         (static_cast<double>(X) * static_cast<double>(Y) * static_cast<double>(U) *
          static_cast<double>(V));
}

}  // namespace lfkm::bitstream
