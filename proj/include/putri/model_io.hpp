#pragma once

#include <string>

#include "putri/model.hpp"

namespace putri {

// Binary model format:
//   magic "PUTR", version byte 0x01, u32 little-endian header length,
//   UTF-8 JSON header {config, live head/node indices, tensor index
//   name -> (dtype "f32", shape, offset, length)},
//   zero padding to a 64-byte boundary, then raw little-endian f32 tensor
//   payloads in index order. Tensor offsets are relative to the payload
//   start and are multiples of 64.
//
// save(load(path)) reproduces the input byte for byte.
void save(const ToyTransformer& model, const std::string& path);
ToyTransformer load(const std::string& path);

}  // namespace putri
