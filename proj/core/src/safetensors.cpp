#include "cbench/safetensors.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace cbench {

namespace {

using json = nlohmann::json;

std::int64_t shape_numel(const std::vector<std::int64_t>& shape,
                         const std::string& name) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d < 0) {
      throw SafetensorsError("tensor '" + name + "': negative dimension");
    }
    n *= d;
  }
  return n;
}

}  // namespace

std::int64_t Tensor::numel() const {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

std::vector<double> Tensor::as_f64() const {
  if (dtype == "F64") return f64;
  return std::vector<double>(f32.begin(), f32.end());
}

Tensor tensor_f32(std::vector<std::int64_t> shape, std::vector<float> data) {
  Tensor t;
  t.dtype = "F32";
  t.shape = std::move(shape);
  t.f32 = std::move(data);
  if (t.numel() != static_cast<std::int64_t>(t.f32.size())) {
    throw SafetensorsError("tensor_f32: shape does not match data size");
  }
  return t;
}

Tensor tensor_f64(std::vector<std::int64_t> shape, std::vector<double> data) {
  Tensor t;
  t.dtype = "F64";
  t.shape = std::move(shape);
  t.f64 = std::move(data);
  if (t.numel() != static_cast<std::int64_t>(t.f64.size())) {
    throw SafetensorsError("tensor_f64: shape does not match data size");
  }
  return t;
}

SafetensorsFile SafetensorsFile::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SafetensorsError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw SafetensorsError(path + ": truncated header");

  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (8 + header_len > bytes.size()) {
    throw SafetensorsError(path + ": header length exceeds file size");
  }
  json header;
  try {
    header = json::parse(bytes.substr(8, header_len));
  } catch (const json::parse_error& e) {
    throw SafetensorsError(path + ": header JSON parse error: " + e.what());
  }
  if (!header.is_object()) {
    throw SafetensorsError(path + ": header is not a JSON object");
  }

  const std::size_t buffer_begin = 8 + header_len;
  const std::size_t buffer_size = bytes.size() - buffer_begin;
  SafetensorsFile file;
  for (const auto& [name, meta] : header.items()) {
    if (name == "__metadata__") continue;
    if (!meta.is_object() || !meta.contains("dtype") ||
        !meta.contains("shape") || !meta.contains("data_offsets")) {
      throw SafetensorsError("tensor '" + name + "': malformed header entry");
    }
    Tensor t;
    t.dtype = meta["dtype"].get<std::string>();
    std::size_t elem_size = 0;
    if (t.dtype == "F32") {
      elem_size = 4;
    } else if (t.dtype == "F64") {
      elem_size = 8;
    } else {
      throw SafetensorsError("tensor '" + name + "': unsupported dtype " +
                             t.dtype + " (only F32 and F64 are readable)");
    }
    t.shape = meta["shape"].get<std::vector<std::int64_t>>();
    const std::int64_t n = shape_numel(t.shape, name);
    const auto offsets = meta["data_offsets"].get<std::vector<std::int64_t>>();
    if (offsets.size() != 2 || offsets[0] < 0 || offsets[1] < offsets[0]) {
      throw SafetensorsError("tensor '" + name + "': bad data_offsets");
    }
    const std::size_t begin = static_cast<std::size_t>(offsets[0]);
    const std::size_t end = static_cast<std::size_t>(offsets[1]);
    if (end > buffer_size) {
      throw SafetensorsError("tensor '" + name +
                             "': data_offsets exceed buffer");
    }
    if (end - begin != static_cast<std::size_t>(n) * elem_size) {
      throw SafetensorsError("tensor '" + name +
                             "': data span does not match shape");
    }
    const char* src = bytes.data() + buffer_begin + begin;
    if (t.dtype == "F32") {
      t.f32.resize(static_cast<std::size_t>(n));
      std::memcpy(t.f32.data(), src, end - begin);
    } else {
      t.f64.resize(static_cast<std::size_t>(n));
      std::memcpy(t.f64.data(), src, end - begin);
    }
    file.tensors_.emplace(name, std::move(t));
  }
  return file;
}

bool SafetensorsFile::contains(const std::string& name) const {
  return tensors_.count(name) != 0;
}

const Tensor& SafetensorsFile::tensor(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw SafetensorsError("missing tensor '" + name + "'");
  }
  return it->second;
}

std::vector<std::string> SafetensorsFile::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

void save_safetensors(const std::string& path,
                      const std::map<std::string, Tensor>& tensors) {
  json header = json::object();
  std::int64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::size_t elem_size = t.dtype == "F32" ? 4 : 8;
    if (t.dtype != "F32" && t.dtype != "F64") {
      throw SafetensorsError("tensor '" + name + "': unsupported dtype " +
                             t.dtype);
    }
    const std::int64_t bytes =
        t.numel() * static_cast<std::int64_t>(elem_size);
    header[name] = {{"dtype", t.dtype},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw SafetensorsError("cannot write " + path);
  const std::uint64_t header_len = header_str.size();
  out.write(reinterpret_cast<const char*>(&header_len), 8);
  out.write(header_str.data(),
            static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, t] : tensors) {
    (void)name;
    if (t.dtype == "F32") {
      out.write(reinterpret_cast<const char*>(t.f32.data()),
                static_cast<std::streamsize>(t.f32.size() * 4));
    } else {
      out.write(reinterpret_cast<const char*>(t.f64.data()),
                static_cast<std::streamsize>(t.f64.size() * 8));
    }
  }
  if (!out) throw SafetensorsError("write failed: " + path);
}

}  // namespace cbench
