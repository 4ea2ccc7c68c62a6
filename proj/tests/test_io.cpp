#include <fstream>

#include "support.hpp"

using namespace pcsnet;
using namespace pcsnet::testing;

namespace {

Checkpoint sample_checkpoint() {
  Rng rng(60);
  Checkpoint ck;
  ck.config = R"({"note":"round trip"})";
  ck.put("a", random_tensor_f(Shape{2, 3, 4}, rng));
  ck.put("b", random_tensor(Shape{5}, rng));
  ck.put("empty", Tensor<float>(Shape{0}));
  Tensor<double> special(Shape{4}, std::vector<double>{-0.0, 1e-310, std::numeric_limits<double>::max(), -1.5});
  ck.put("special", special);
  return ck;
}

std::vector<std::uint8_t> bytes_of(const Tensor<float>& t) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
  return {p, p + t.size() * sizeof(float)};
}

}  // namespace

TEST(Checkpoint, EncodeDecodeIsBitExact) {
  const auto ck = sample_checkpoint();
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.config, ck.config);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].first, ck.tensors[i].first);
    EXPECT_EQ(back.tensors[i].second.index(), ck.tensors[i].second.index());
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);
  const auto s = back.get<double>("special");
  EXPECT_TRUE(std::signbit(s[0]));
  EXPECT_EQ(s[1], 1e-310);
}

TEST(Checkpoint, FileRoundTrip) {
  ScratchDir dir;
  const auto ck = sample_checkpoint();
  save_checkpoint(ck, dir / "m.pcsn");
  EXPECT_EQ(read_file(dir / "m.pcsn"), encode_checkpoint(ck));
  EXPECT_EQ(encode_checkpoint(load_checkpoint(dir / "m.pcsn")), encode_checkpoint(ck));
  EXPECT_THROW(load_checkpoint(dir / "missing.pcsn"), std::runtime_error);
}

TEST(Checkpoint, EveryCorruptedByteIsRejected) {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= 0x10;
    if (i < 4) {
      EXPECT_THROW(decode_checkpoint(bad), FormatError) << "byte " << i;
    } else if (i < 8) {
      EXPECT_THROW(decode_checkpoint(bad), VersionError) << "byte " << i;
    } else {
      EXPECT_THROW(decode_checkpoint(bad), ChecksumError) << "byte " << i;
    }
  }
}

TEST(Checkpoint, TruncationIsRejected) {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  for (std::size_t n : {std::size_t{0}, std::size_t{3}, std::size_t{11}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_ANY_THROW(decode_checkpoint(cut)) << n;
  }
}

TEST(Checkpoint, ModelRoundTripIsBitExact) {
  TrainConfig cfg;
  cfg.seed = 9;
  Model<float> m(cfg);
  Rng rng(61);
  m.bank.prototypes = random_tensor_f(Shape{1, 64, 4, 4}, rng);
  m.bank.k = 3;
  m.bank.r_sq = 0.37;
  m.bank.alpha = 0.2;
  m.extra = R"({"support":[1,2]})";
  const auto bytes = encode_checkpoint(m.to_checkpoint());
  auto back = Model<float>::from_checkpoint(decode_checkpoint(bytes));
  EXPECT_EQ(encode_checkpoint(back.to_checkpoint()), bytes);
  EXPECT_EQ(back.bank.r_sq, 0.37);
  EXPECT_EQ(back.config.seed, 9u);
  EXPECT_EQ(back.config.seg_loss, cfg.seg_loss);
  const auto a = m.adaptor.parameters(), b = back.adaptor.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(bytes_of(a[i]->value), bytes_of(b[i]->value));
  const auto img = random_tensor_f(Shape{3, 16, 16}, rng, 0, 1);
  EXPECT_EQ(m.infer(img).map.vec(), back.infer(img).map.vec());
}

TEST(Checkpoint, MissingTensorAndBadConfig) {
  TrainConfig cfg;
  Model<float> m(cfg);
  m.bank.prototypes = Tensor<float>(Shape{1, 64, 2, 2});
  m.bank.r_sq = 1.0;
  auto ck = m.to_checkpoint();
  auto no_bank = ck;
  std::erase_if(no_bank.tensors, [](const auto& t) { return t.first == "bank.r_sq"; });
  EXPECT_THROW(Model<float>::from_checkpoint(no_bank), std::runtime_error);
  auto bad_json = ck;
  bad_json.config = "{not json";
  EXPECT_THROW(Model<float>::from_checkpoint(bad_json), FormatError);
}

TEST(Image, PnmRoundTripIsBitExact) {
  Rng rng(62);
  for (std::size_t channels : {1u, 3u}) {
    Image8 img{7, 5, channels, {}};
    for (std::size_t i = 0; i < 7 * 5 * channels; ++i) img.pixels.push_back(static_cast<std::uint8_t>(rng.uniform_int(0, 255)));
    EXPECT_EQ(decode_pnm(encode_pnm(img)), img);
    EXPECT_EQ(to_image(to_tensor<float>(img)), img);
    EXPECT_EQ(to_image(to_tensor<double>(img)), img);
  }
  ScratchDir dir;
  Image8 img{2, 2, 3, std::vector<std::uint8_t>(12, 200)};
  write_pnm(dir / "x.ppm", img);
  EXPECT_EQ(read_pnm(dir / "x.ppm"), img);
}

TEST(Image, HeaderParsingAndErrors) {
  const std::string with_comment = "P5\n# comment\n2 1\n255\n\x01\x02";
  const auto img = decode_pnm(std::vector<std::uint8_t>(with_comment.begin(), with_comment.end()));
  EXPECT_EQ(img.width, 2u);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{1, 2}));
  for (const std::string bad : {"P3\n1 1\n255\n0 0 0", "P6\n1 1\n65535\nxxxxxx", "P6\n2 2\n255\nabc", "Q6", ""})
    EXPECT_THROW(decode_pnm(std::vector<std::uint8_t>(bad.begin(), bad.end())), FormatError) << bad;
}

TEST(Image, Quantization) {
  EXPECT_EQ(quantize(0.0), 0);
  EXPECT_EQ(quantize(1.0), 255);
  EXPECT_EQ(quantize(-3.0), 0);
  EXPECT_EQ(quantize(7.0), 255);
  EXPECT_EQ(quantize(0.5), 128);
  EXPECT_EQ(quantize(127.0 / 255.0), 127);
}

TEST(Dataset, GenerationIsDeterministicAndComplete) {
  ScratchDir a, b;
  const auto cfg = tiny_dataset_config();
  generate_dataset(cfg, a.path());
  generate_dataset(cfg, b.path());
  std::size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(read_file(e.path()), read_file(b.path() / std::filesystem::relative(e.path(), a.path()))) << e.path();
  }
  EXPECT_EQ(files, 3u + 4u + 2u * 4u);

  const auto ds = load_dataset(a.path());
  EXPECT_EQ(ds.train.size(), 3u);
  ASSERT_EQ(ds.test.size(), 8u);
  EXPECT_EQ(ds.image_size(), 32u);
  for (std::size_t i = 0; i < ds.test.size(); ++i) {
    const auto& s = ds.test[i];
    EXPECT_EQ(s.label, i < 4 ? 0 : 1);
    std::size_t area = 0;
    for (float v : s.mask.vec()) area += v > 0.5f;
    if (s.label == 0) {
      EXPECT_EQ(area, 0u);
    } else {
      EXPECT_GE(area, cfg.min_area_px());
      EXPECT_LE(area, cfg.max_area_px());
    }
  }
  EXPECT_EQ(ds.test[4].name, "defect/000.ppm");
}

TEST(Dataset, SeedsGiveDifferentCategories) {
  const auto t1 = Texture::from_seed(1), t2 = Texture::from_seed(2);
  EXPECT_NE(render_normal(t1, 5, 16).vec(), render_normal(t2, 5, 16).vec());
  EXPECT_EQ(render_normal(t1, 5, 16).vec(), render_normal(t1, 5, 16).vec());
  EXPECT_NE(render_normal(t1, 5, 16).vec(), render_normal(t1, 6, 16).vec());
}

TEST(Dataset, LoaderErrors) {
  ScratchDir dir;
  EXPECT_THROW(load_dataset(dir.path()), std::runtime_error);
  generate_dataset(tiny_dataset_config(), dir.path());
  std::filesystem::remove(dir / "test/defect_masks/001.pgm");
  try {
    load_dataset(dir.path());
    FAIL() << "expected a missing-mask error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("001"), std::string::npos);
  }
  ProceduralConfig bad = tiny_dataset_config();
  bad.size = 30;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Dataset, SelectShots) {
  const auto a = select_shots(8, 8, 3);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(select_shots(8, 4, 3), (std::vector<std::size_t>(a.begin(), a.begin() + 4)));
  EXPECT_NE(select_shots(8, 8, 3), select_shots(8, 8, 4));
  EXPECT_THROW(select_shots(8, 9, 3), std::invalid_argument);
  EXPECT_THROW(select_shots(8, 0, 3), std::invalid_argument);
}
