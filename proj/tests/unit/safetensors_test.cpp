#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cbench/safetensors.hpp"
#include "doctest.h"
#include "support/fixture.hpp"

using cbench::SafetensorsError;
using cbench::SafetensorsFile;
using cbench::Tensor;

namespace {

std::string pack(const std::string& header, const std::string& buffer) {
  const std::uint64_t len = header.size();
  std::string out(8, '\0');
  std::memcpy(out.data(), &len, 8);
  out += header;
  out += buffer;
  return out;
}

std::string write_bytes(const std::string& bytes) {
  const std::string path = fixture::scratch_path("cb_st", ".safetensors");
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  REQUIRE(out.good());
  return path;
}

// Loads a hand-assembled file and checks the error message mentions
// `needle` (typically the offending tensor's name plus the failure mode).
void expect_load_error(const std::string& bytes, const std::string& needle) {
  const std::string path = write_bytes(bytes);
  bool threw = false;
  try {
    SafetensorsFile::load(path);
  } catch (const SafetensorsError& e) {
    threw = true;
    INFO("message: ", e.what(), " expected substring: ", needle);
    CHECK(std::string(e.what()).find(needle) != std::string::npos);
  }
  CHECK(threw);
  std::filesystem::remove(path);
}

}  // namespace

TEST_CASE("tensor constructors validate shape against data") {
  const Tensor t = cbench::tensor_f32({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.dtype == "F32");
  CHECK(t.numel() == 6);
  CHECK(t.as_f64() == std::vector<double>{1, 2, 3, 4, 5, 6});

  const Tensor d = cbench::tensor_f64({4}, {0.5, -1.25, 3.0, 7.5});
  CHECK(d.dtype == "F64");
  CHECK(d.as_f64() == std::vector<double>{0.5, -1.25, 3.0, 7.5});

  CHECK_THROWS_AS(cbench::tensor_f32({2, 2}, {1.0f}), SafetensorsError);
  CHECK_THROWS_AS(cbench::tensor_f64({3}, {1.0, 2.0}), SafetensorsError);
  CHECK_THROWS_AS(cbench::tensor_f32({-2, 3}, {1, 2, 3, 4, 5, 6}),
                  SafetensorsError);
}

TEST_CASE("save and load round-trip both dtypes bit-exactly") {
  std::map<std::string, Tensor> tensors;
  tensors["layer/weight"] =
      cbench::tensor_f32({2, 3}, {1.5f, -2.25f, 3.0e-8f, 0.0f, -0.0f, 4e7f});
  tensors["bias"] = cbench::tensor_f64({4}, {3.141592653589793, -1.0 / 3.0,
                                             1e-300, 2.5});

  const std::string path = fixture::scratch_path("cb_st", ".safetensors");
  cbench::save_safetensors(path, tensors);
  const auto file = SafetensorsFile::load(path);
  std::filesystem::remove(path);

  CHECK(file.names() == std::vector<std::string>{"bias", "layer/weight"});
  CHECK(file.contains("bias"));
  CHECK_FALSE(file.contains("Bias"));

  const Tensor& w = file.tensor("layer/weight");
  CHECK(w.dtype == "F32");
  CHECK(w.shape == std::vector<std::int64_t>{2, 3});
  CHECK(w.f32 == tensors["layer/weight"].f32);

  const Tensor& b = file.tensor("bias");
  CHECK(b.dtype == "F64");
  CHECK(b.f64 == tensors["bias"].f64);

  bool threw = false;
  try {
    file.tensor("absent");
  } catch (const SafetensorsError& e) {
    threw = true;
    CHECK(std::string(e.what()).find("absent") != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("metadata entries are ignored on load") {
  std::string buffer(4, '\0');
  const float v = 9.5f;
  std::memcpy(buffer.data(), &v, 4);
  const std::string header = R"({"__metadata__": {"format": "pt"}, )"
                             R"("x": {"dtype": "F32", "shape": [1], )"
                             R"("data_offsets": [0, 4]}})";
  const std::string path = write_bytes(pack(header, buffer));
  const auto file = SafetensorsFile::load(path);
  std::filesystem::remove(path);
  CHECK(file.names() == std::vector<std::string>{"x"});
  CHECK(file.tensor("x").f32 == std::vector<float>{9.5f});
}

TEST_CASE("loader rejects malformed containers with named tensors") {
  std::string four_bytes(4, '\0');

  SUBCASE("missing file") {
    CHECK_THROWS_AS(SafetensorsFile::load("/nonexistent/m.safetensors"),
                    SafetensorsError);
  }
  SUBCASE("shorter than the length prefix") {
    expect_load_error("abc", "truncated header");
  }
  SUBCASE("declared header overruns the file") {
    std::string bytes(8, '\0');
    const std::uint64_t len = 1000;
    std::memcpy(bytes.data(), &len, 8);
    expect_load_error(bytes, "header length exceeds file size");
  }
  SUBCASE("header is not JSON") {
    expect_load_error(pack("not json at all", ""), "parse error");
  }
  SUBCASE("header is a JSON array") {
    expect_load_error(pack("[1, 2]", ""), "not a JSON object");
  }
  SUBCASE("entry without data_offsets") {
    expect_load_error(
        pack(R"({"w": {"dtype": "F32", "shape": [1]}})", four_bytes),
        "'w': malformed header entry");
  }
  SUBCASE("unsupported dtype") {
    expect_load_error(
        pack(R"({"ids": {"dtype": "I64", "shape": [1], )"
             R"("data_offsets": [0, 8]}})",
             std::string(8, '\0')),
        "'ids': unsupported dtype I64");
  }
  SUBCASE("offsets outside the buffer") {
    expect_load_error(
        pack(R"({"w": {"dtype": "F32", "shape": [1], )"
             R"("data_offsets": [0, 4]}})",
             ""),
        "'w': data_offsets exceed buffer");
  }
  SUBCASE("reversed offsets") {
    expect_load_error(
        pack(R"({"w": {"dtype": "F32", "shape": [1], )"
             R"("data_offsets": [4, 0]}})",
             four_bytes),
        "'w': bad data_offsets");
  }
  SUBCASE("span disagrees with shape") {
    expect_load_error(
        pack(R"({"w": {"dtype": "F32", "shape": [2], )"
             R"("data_offsets": [0, 4]}})",
             four_bytes),
        "'w': data span does not match shape");
  }
  SUBCASE("negative dimension") {
    expect_load_error(
        pack(R"({"w": {"dtype": "F32", "shape": [-1], )"
             R"("data_offsets": [0, 4]}})",
             four_bytes),
        "'w': negative dimension");
  }
}
