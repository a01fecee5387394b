#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "cohff/checkpoint.hpp"
#include "cohff/common.hpp"

using namespace cohff;

namespace {
std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("checkpoint round trip is bit-exact", "[checkpoint]") {
  ParamStore ps;
  Rng rng(13);
  Tensor a = ps.add("enc.w", Tensor({3, 4}));
  Tensor b = ps.add("enc.b", Tensor({4}));
  xavier_uniform(a, 3, 4, rng);
  b.at(2) = 0x1.fffffffffffffp-3;  // exact binary pattern must survive
  const std::string path = temp_path("cohff_ckpt_test.bin");
  save_checkpoint(ps, path);

  ParamStore fresh;
  Tensor a2 = fresh.add("enc.w", Tensor({3, 4}));
  Tensor b2 = fresh.add("enc.b", Tensor({4}));
  load_checkpoint(fresh, path);
  CHECK(a2.values() == a.values());
  CHECK(b2.values() == b.values());
  std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects corrupt containers", "[checkpoint]") {
  ParamStore ps;
  ps.add("x", Tensor::from({2}, {1.0, 2.0}));
  std::vector<NamedTensor> entries = {{"x", ps.at("x").tensor}};
  std::vector<uint8_t> buf = encode_tensors(entries);

  auto mutated = buf;
  mutated[0] = 'X';
  CHECK_THROWS_WITH(decode_tensors(mutated), Catch::Matchers::ContainsSubstring("magic"));

  mutated = buf;
  mutated[4] = 99;  // version
  CHECK_THROWS_WITH(decode_tensors(mutated),
                    Catch::Matchers::ContainsSubstring("version"));

  for (size_t cut = 0; cut < buf.size(); ++cut) {
    std::vector<uint8_t> trunc(buf.begin(), buf.begin() + cut);
    CHECK_THROWS_AS(decode_tensors(trunc), std::runtime_error);
  }
}

TEST_CASE("checkpoint load validates names and shapes", "[checkpoint]") {
  ParamStore ps;
  ps.add("w", Tensor({2, 2}));
  const std::string path = temp_path("cohff_ckpt_mismatch.bin");
  save_checkpoint(ps, path);

  ParamStore other;
  other.add("v", Tensor({2, 2}));
  CHECK_THROWS_AS(load_checkpoint(other, path), std::out_of_range);

  ParamStore wrong_shape;
  wrong_shape.add("w", Tensor({4}));
  CHECK_THROWS_AS(load_checkpoint(wrong_shape, path), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("missing checkpoint file raises a readable error", "[checkpoint]") {
  ParamStore ps;
  ps.add("w", Tensor({1}));
  CHECK_THROWS_WITH(load_checkpoint(ps, "/nonexistent/nope.bin"),
                    Catch::Matchers::ContainsSubstring("cannot open"));
}
