#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "metadapt/checkpoint.hpp"
#include "test_support.hpp"

using namespace metadapt;

namespace {

// Finite doubles drawn from raw bit patterns, so every exponent range shows up.
PolicyParams random_bits_params(const PolicyArchitecture& arch, RngStream& rng) {
  std::vector<double> flat(arch.parameter_count());
  for (double& v : flat) {
    do {
      v = std::bit_cast<double>(rng.next_u64());
    } while (!std::isfinite(v));
  }
  return PolicyParams::unflatten(arch, flat);
}

std::string expect_error(const std::string& text) {
  try {
    (void)parse_checkpoint(text);
  } catch (const CheckpointError& e) {
    return e.what();
  }
  ADD_FAILURE() << "no error for:\n" << text;
  return {};
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  RngStream rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const PolicyArchitecture arch{1, 1, {static_cast<std::size_t>(rng.uniform(1, 6)), 3}};
    const PolicyParams p = random_bits_params(arch, rng);
    const std::uint64_t digest = rng.next_u64();
    const std::string text = checkpoint_text(p, digest);
    const Checkpoint back = parse_checkpoint(text);
    EXPECT_EQ(back.config_digest, digest);
    EXPECT_EQ(back.params.arch.hidden_sizes, arch.hidden_sizes);
    const auto a = p.flatten();
    const auto b = back.params.flatten();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(a[k]), std::bit_cast<std::uint64_t>(b[k]));
    EXPECT_EQ(checkpoint_text(back.params, back.config_digest), text);
  }
}

TEST(Checkpoint, FileSaveLoadSave) {
  const auto dir = std::filesystem::temp_directory_path() / "metadapt_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "a.ckpt").string();
  const PolicyParams p = testing_support::small_params();
  save_checkpoint(path, p, 0x0123456789abcdefULL);
  const Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.params.flatten(), p.flatten());
  EXPECT_EQ(ck.config_digest, 0x0123456789abcdefULL);
  EXPECT_EQ(checkpoint_text(ck.params, ck.config_digest), checkpoint_text(p, 0x0123456789abcdefULL));
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
}

TEST(Checkpoint, HeaderLayout) {
  const std::string text = checkpoint_text(testing_support::small_params(), 255);
  EXPECT_EQ(text.substr(0, text.find('\n')), "METADAPT-CKPT v1");
  EXPECT_NE(text.find("config_digest 00000000000000ff\n"), std::string::npos);
  EXPECT_NE(text.find("tensor log_std 1 1\n"), std::string::npos);
}

TEST(Checkpoint, WrongVersionIsUnsupported) {
  std::string text = checkpoint_text(testing_support::small_params(), 1);
  text.replace(0, 16, "METADAPT-CKPT v2");
  EXPECT_NE(expect_error(text).find("unsupported checkpoint version"), std::string::npos);
  EXPECT_NE(expect_error("hello\n").find("not a checkpoint"), std::string::npos);
}

TEST(Checkpoint, TruncationNamesTheBlock) {
  const std::string text = checkpoint_text(testing_support::small_params(), 1);
  const auto pos = text.find("tensor hidden1.bias");
  ASSERT_NE(pos, std::string::npos);
  // cut inside the hidden1.bias block: header kept, values dropped
  const std::string cut = text.substr(0, text.find('\n', pos) + 1);
  EXPECT_NE(expect_error(cut).find("hidden1.bias"), std::string::npos);
  const std::string no_end = text.substr(0, text.rfind("end"));
  EXPECT_NE(expect_error(no_end).find("end marker"), std::string::npos);
}

TEST(Checkpoint, MalformedContentIsAnError) {
  const std::string text = checkpoint_text(testing_support::small_params(), 1);
  std::string bad_number = text;
  const auto row = bad_number.find('\n', bad_number.find("tensor log_std")) + 1;
  bad_number.replace(row, 1, "x");
  EXPECT_NE(expect_error(bad_number).find("log_std"), std::string::npos);

  std::string short_row = text;
  const auto w = short_row.find('\n', short_row.find("tensor hidden1.weight")) + 1;
  short_row.erase(w, short_row.find(' ', w) - w + 1);
  EXPECT_NE(expect_error(short_row).find("hidden1.weight"), std::string::npos);

  expect_error(text + "extra\n");
  std::string nan_value = text;
  nan_value.replace(row, nan_value.find('\n', row) - row, "nan");
  EXPECT_NE(expect_error(nan_value).find("non-finite"), std::string::npos);
}
