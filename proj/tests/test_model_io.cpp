#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "xmed/model_io.hpp"

using namespace xmed;

namespace {

Model trained_looking(bool dense, std::uint64_t seed) {
  Model m = dense ? build_densenet_mini({2, 2}, 4, 2, {1, 16, 16}, seed) : build_resnet_mini({1, 1}, 4, 2, {1, 16, 16}, seed);
  // Non-default running statistics so they are known to be stored.
  std::mt19937_64 rng(seed);
  for (auto& p : m.mutable_params()) {
    if (p.role == ParamRole::running_var) p.value = xmed::testing::random_tensor(p.value.shape(), rng, 0.5, 2).cast<float>();
  }
  m.class_names = {"lesion", "normal"};
  m.positive_class = 0;
  return m;
}

void expect_same_model(const Model& a, const Model& b) {
  EXPECT_EQ(a.architecture, b.architecture);
  EXPECT_EQ(a.input_shape(), b.input_shape());
  EXPECT_EQ(a.num_classes(), b.num_classes());
  EXPECT_EQ(a.class_names, b.class_names);
  EXPECT_EQ(a.positive_class, b.positive_class);
  EXPECT_EQ(a.capture_layer(), b.capture_layer());
  ASSERT_EQ(a.layers().size(), b.layers().size());
  for (std::size_t i = 0; i < a.layers().size(); ++i) EXPECT_EQ(a.layers()[i].name, b.layers()[i].name);
  ASSERT_EQ(a.params().size(), b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    EXPECT_EQ(a.params()[i].name, b.params()[i].name);
    const auto av = a.params()[i].value.values();
    const auto bv = b.params()[i].value.values();
    ASSERT_EQ(av.size(), bv.size());
    EXPECT_EQ(std::memcmp(av.data(), bv.data(), av.size() * sizeof(float)), 0) << a.params()[i].name;
  }
}

std::uint64_t json_length(const std::vector<std::byte>& bytes) {
  std::uint64_t n = 0;
  for (int i = 7; i >= 0; --i) n = (n << 8) | std::to_integer<std::uint64_t>(bytes[8 + i]);
  return n;
}

}  // namespace

TEST(ModelIo, RoundTripIsBitExact) {
  for (bool dense : {false, true}) {
    const Model m = trained_looking(dense, 3);
    const auto dir = xmed::testing::scratch_dir("model_io_roundtrip");
    save_model(m, dir / "m.xmed");
    const Model back = load_model(dir / "m.xmed");
    expect_same_model(m, back);
    const Tensor x = Tensor({1, 1, 16, 16}, 0.25f);
    EXPECT_EQ(m.forward(x).logits, back.forward(x).logits);
    EXPECT_EQ(serialize_model(back), serialize_model(m));
  }
}

TEST(ModelIo, ExtremeValuesSurvive) {
  Model m = build_resnet_mini({1}, 2, 2, {1, 8, 8});
  auto& w = m.param("fc.weight").value;
  w[0] = -0.0f;
  w[1] = std::numeric_limits<float>::denorm_min();
  w[2] = std::numeric_limits<float>::max();
  const Model back = deserialize_model(serialize_model(m));
  EXPECT_TRUE(std::signbit(back.param("fc.weight").value[0]));
  EXPECT_EQ(back.param("fc.weight").value[1], w[1]);
  EXPECT_EQ(back.param("fc.weight").value[2], w[2]);
}

TEST(ModelIo, FileSizeArithmetic) {
  const Model m = trained_looking(true, 4);
  const auto bytes = serialize_model(m);
  const std::uint64_t n = json_length(bytes);
  EXPECT_EQ(n, describe_model(m).size());
  EXPECT_EQ(bytes.size(), kModelHeaderSize + n + 4 * m.stored_value_count());
  EXPECT_EQ(std::memcmp(bytes.data(), "XMED", 4), 0);
  EXPECT_EQ(std::to_integer<int>(bytes[4]), 1);
  EXPECT_EQ(std::to_integer<int>(bytes[5]) | std::to_integer<int>(bytes[6]) | std::to_integer<int>(bytes[7]), 0);
}

namespace {

std::size_t format_offset(const std::vector<std::byte>& bytes) {
  try {
    deserialize_model(bytes);
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "expected FormatError";
  return SIZE_MAX;
}

}  // namespace

TEST(ModelIo, CorruptionIsRejectedWithOffset) {
  const auto good = serialize_model(trained_looking(false, 5));
  const std::size_t n = json_length(good);

  auto magic = good;
  magic[1] = std::byte{'Y'};
  EXPECT_EQ(format_offset(magic), 0u);

  auto version = good;
  version[4] = std::byte{2};
  EXPECT_EQ(format_offset(version), 4u);

  auto length = good;
  length[15] = std::byte{0x7f};
  EXPECT_EQ(format_offset(length), 8u);

  EXPECT_EQ(format_offset(std::vector<std::byte>(good.begin(), good.begin() + 10)), 10u);

  auto json = good;
  json[kModelHeaderSize] = std::byte{'x'};
  EXPECT_EQ(format_offset(json), kModelHeaderSize);

  auto truncated = std::vector<std::byte>(good.begin(), good.end() - 1);
  EXPECT_EQ(format_offset(truncated), truncated.size());

  auto trailing = good;
  trailing.push_back(std::byte{0});
  EXPECT_EQ(format_offset(trailing), good.size());

  // Valid JSON that names a different tensor shape than the layers imply.
  std::string text(reinterpret_cast<const char*>(good.data() + kModelHeaderSize), n);
  const auto pos = text.find("\"num_classes\":2");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 15, "\"num_classes\":3");
  std::vector<std::byte> edited(good.begin(), good.begin() + kModelHeaderSize);
  for (char c : text) edited.push_back(static_cast<std::byte>(c));
  edited.insert(edited.end(), good.begin() + static_cast<std::ptrdiff_t>(kModelHeaderSize + n), good.end());
  EXPECT_THROW(deserialize_model(edited), FormatError);
}

TEST(ModelIo, FailedLoadLeavesNoPartialModel) {
  const auto dir = xmed::testing::scratch_dir("model_io_partial");
  const Model original = trained_looking(false, 6);
  save_model(original, dir / "m.xmed");
  {
    std::fstream f(dir / "m.xmed", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("ZZZZ", 4);
  }
  Model target = trained_looking(true, 7);
  const auto before = serialize_model(target);
  EXPECT_THROW(target = load_model(dir / "m.xmed"), FormatError);
  EXPECT_EQ(serialize_model(target), before);
  EXPECT_THROW(load_model(dir / "missing.xmed"), IoError);
  EXPECT_FALSE(std::filesystem::exists(dir / "m.xmed.partial"));
}
