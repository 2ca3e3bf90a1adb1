#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace cbench {

class SafetensorsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An owned row-major tensor. Exactly one of f32/f64 is populated, matching
// dtype ("F32" or "F64").
struct Tensor {
  std::string dtype;
  std::vector<std::int64_t> shape;
  std::vector<float> f32;
  std::vector<double> f64;

  std::int64_t numel() const;
  std::vector<double> as_f64() const;  // widening copy for either dtype
};

Tensor tensor_f32(std::vector<std::int64_t> shape, std::vector<float> data);
Tensor tensor_f64(std::vector<std::int64_t> shape, std::vector<double> data);

// Single-file safetensors container: 8-byte little-endian header length,
// UTF-8 JSON header mapping tensor name to {dtype, shape, data_offsets},
// then the packed buffer. Only F32 and F64 are accepted; errors name the
// offending tensor.
class SafetensorsFile {
 public:
  static SafetensorsFile load(const std::string& path);

  bool contains(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const;
  std::vector<std::string> names() const;  // sorted

 private:
  std::map<std::string, Tensor> tensors_;
};

void save_safetensors(const std::string& path,
                      const std::map<std::string, Tensor>& tensors);

}  // namespace cbench
