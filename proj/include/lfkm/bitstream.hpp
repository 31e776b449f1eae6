#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "lfkm/quantizer.hpp"

namespace lfkm::bitstream {

constexpr std::size_t kHeaderBytes = 29;
constexpr std::uint8_t kFormatVersion = 1;

struct HuffmanTable {
  std::vector<std::uint8_t> lengths;  // code length per symbol, 0 = unused
};

// Optimal prefix code lengths. Ties in the merge queue break toward the
// smaller node id; leaves carry their symbol index, internal nodes are
// numbered from the alphabet size upward in creation order. A one-symbol
// alphabet still gets a single-bit code.
HuffmanTable huffman_build(const std::vector<std::uint64_t>& freqs);

// Canonical codes from the length table: symbols ordered by (length, index),
// code values assigned in increasing numeric order, bits written MSB first.
std::vector<std::uint8_t> huffman_encode(const HuffmanTable& table,
                                         const std::vector<std::uint32_t>& symbols,
                                         std::uint64_t& bit_count);
std::vector<std::uint32_t> huffman_decode(const HuffmanTable& table,
                                          const std::uint8_t* data, std::size_t size,
                                          std::uint64_t bit_count);

std::uint32_t crc32(const std::uint8_t* data, std::size_t size);

std::vector<std::uint8_t> serialize(const quantizer::QuantizedModel& qm);
quantizer::QuantizedModel deserialize(const std::vector<std::uint8_t>& bytes);

// 8 * bytes / (X * Y * U * V)
double compute_bpp(std::size_t byte_count, int X, int Y, int U, int V);

}  // namespace lfkm::bitstream
