#include <atomic>
#include <cmath>
#include <fstream>

#include "attrdisc/image.hpp"
#include "attrdisc/parallel.hpp"
#include "attrdisc/rng.hpp"
#include "attrdisc/text_io.hpp"
#include "test_support.hpp"

namespace attrdisc {
namespace {

using testing::TempDir;

TEST(Csv, SplitEscapeRoundTrip) {
  EXPECT_EQ(split_csv_line("a,b,,c"), (std::vector<std::string>{"a", "b", "", "c"}));
  EXPECT_EQ(split_csv_line(R"("x,y","say ""hi""",z)"), (std::vector<std::string>{"x,y", "say \"hi\"", "z"}));
  for (std::string field : {"plain", "com,ma", "quo\"te", "", " space "}) {
    EXPECT_EQ(split_csv_line(csv_escape(field) + ",end"), (std::vector<std::string>{field, "end"}));
  }
}

TEST(Csv, ParseSkipsCommentsAndKeepsLineNumbers) {
  const auto t = parse_csv("# note\nword,score\n\nred,1\n# skip\nblue,2\n", "mem");
  EXPECT_EQ(t.header, (std::vector<std::string>{"word", "score"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.line_numbers, (std::vector<std::size_t>{4, 6}));
  EXPECT_EQ(t.column("score"), 1u);
  EXPECT_ERROR_KIND(t.column("nope"), ErrorKind::kFormat);
  EXPECT_ANY_THROW(parse_csv("a,b\n1\n", "mem"));
}

TEST(Numbers, FormatAndParse) {
  EXPECT_EQ(format_fixed(0.5, 3), "0.500");
  EXPECT_EQ(format_fixed(-1.25, 1), "-1.2");
  EXPECT_EQ(format_fixed(-0.0, 2), "0.00");
  EXPECT_EQ(parse_real("2.5e-1", "ctx"), 0.25);
  EXPECT_EQ(parse_integer("-17", "ctx"), -17);
  EXPECT_ERROR_KIND(parse_real("1.5x", "ctx"), ErrorKind::kParse);
  EXPECT_ERROR_KIND(parse_integer("3.0", "ctx"), ErrorKind::kParse);
  EXPECT_EQ(split_list("1,,2, 3", ','), (std::vector<std::string>{"1", "2", "3"}));
  EXPECT_EQ(split_lines("a\r\nb\n"), (std::vector<std::string>{"a", "b"}));
}

TEST(AtomicWrite, ReplacesContentsAndCreatesParents) {
  TempDir dir;
  const auto path = dir / "deep/nested/file.txt";
  write_file_atomic(path, "one");
  EXPECT_EQ(read_file(path), "one");
  write_file_atomic(path, std::string("two\0three", 9));
  EXPECT_EQ(read_file(path), std::string("two\0three", 9));
  std::size_t entries = 0;
  for (const auto& e : std::filesystem::directory_iterator(path.parent_path())) {
    (void)e;
    ++entries;
  }
  EXPECT_EQ(entries, 1u);
  EXPECT_ERROR_KIND(read_file(dir / "missing"), ErrorKind::kMissingInput);
}

Image random_image(std::uint64_t seed, std::size_t w, std::size_t h) {
  Rng rng(seed);
  Image im(w, h);
  for (auto& v : im.data) v = static_cast<float>(rng.below(256)) / 255.0f;
  return im;
}

TEST(Ppm, RoundTripOnQuantisedValues) {
  TempDir dir;
  const auto im = random_image(1, 7, 5);
  write_ppm(im, dir / "a.ppm");
  const auto back = read_ppm(dir / "a.ppm");
  ASSERT_EQ(back.width, 7u);
  ASSERT_EQ(back.height, 5u);
  for (std::size_t i = 0; i < im.data.size(); ++i) EXPECT_NEAR(back.data[i], im.data[i], 1e-7);
  const auto bytes = encode_ppm(im);
  EXPECT_EQ(bytes.substr(0, 2), "P6");
  EXPECT_ERROR_KIND(decode_ppm("P3\n1 1\n255\n0 0 0"), ErrorKind::kFormat);
  EXPECT_ANY_THROW(decode_ppm(bytes.substr(0, bytes.size() - 2)));
}

TEST(Pgm, EncodesScaledBytes) {
  Grid g(2, 3);
  g.values = {0.0, 0.5, 1.0, 0.25, 2.0, -1.0};
  const auto bytes = encode_pgm(g, "k=8");
  EXPECT_EQ(bytes.substr(0, 2), "P5");
  EXPECT_NE(bytes.find("# k=8"), std::string::npos);
  const auto back = decode_pgm(bytes);
  ASSERT_EQ(back.rows, 2u);
  ASSERT_EQ(back.cols, 3u);
  const std::string tail = bytes.substr(bytes.size() - 6);
  EXPECT_EQ(static_cast<unsigned char>(tail[0]), 0);
  EXPECT_EQ(static_cast<unsigned char>(tail[2]), 255);
  EXPECT_EQ(static_cast<unsigned char>(tail[4]), 255);
  EXPECT_EQ(static_cast<unsigned char>(tail[5]), 0);
  EXPECT_NEAR(back.values[1], 0.5, 1.0 / 255.0);
}

TEST(GridCsv, RoundTripAtFixedPrecision) {
  Rng rng(2);
  Grid g(4, 6);
  for (auto& v : g.values) v = rng.uniform();
  const auto text = encode_grid_csv(g, "word=red", 10);
  EXPECT_EQ(text.substr(0, 1), "#");
  const auto back = decode_grid_csv(text);
  ASSERT_EQ(back.rows, 4u);
  for (std::size_t i = 0; i < g.values.size(); ++i) EXPECT_NEAR(back.values[i], g.values[i], 1e-10);
  EXPECT_ANY_THROW(decode_grid_csv("1,2\n3\n"));
}

TEST(Resize, IdentityConstantAndBounds) {
  const auto im = random_image(3, 9, 6);
  EXPECT_EQ(resize_bilinear(im, 9, 6), im);
  const Image flat(5, 5, 0.3f);
  const auto big = resize_bilinear(flat, 13, 8);
  EXPECT_EQ(big.width, 13u);
  for (float v : big.data) EXPECT_NEAR(v, 0.3f, 1e-6f);
  const auto small = resize_bilinear(im, 3, 2);
  for (float v : small.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  Grid g(2, 2);
  g.values = {0, 1, 0, 1};
  const auto up = resize_bilinear(g, 2, 4);
  // Pixel-centre sampling: x = (i + 0.5) / 2 - 0.5 clamped to [0, 1].
  EXPECT_EQ(up.values[0], 0.0);
  EXPECT_DOUBLE_EQ(up.values[1], 0.25);
  EXPECT_DOUBLE_EQ(up.values[2], 0.75);
  EXPECT_EQ(up.values[3], 1.0);
  EXPECT_ANY_THROW(resize_bilinear(Grid(), 2, 2));
}

TEST(MeanImage, AveragesPerPixel) {
  const std::vector<Image> ims{Image(2, 2, 0.2f), Image(2, 2, 0.6f)};
  for (float v : mean_image(ims).data) EXPECT_NEAR(v, 0.4f, 1e-7f);
}

TEST(Rng, ReproducibleStreams) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  EXPECT_EQ(Rng::derive(42, "x"), Rng::derive(42, "x"));
  EXPECT_NE(Rng::derive(42, "x"), Rng::derive(42, "y"));
  EXPECT_NE(Rng::derive(42, "x"), Rng::derive(43, "x"));
  // FNV-1a 64 reference values.
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
  Rng r(7);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 50000; ++i) ++counts[r.below(5)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
}

TEST(ParallelFor, CoversEveryIndexOnceAndRethrows) {
  for (std::size_t jobs : {1, 2, 3, 8}) {
    std::vector<std::atomic<int>> hits(37);
    parallel_for(hits.size(), jobs, [&](std::size_t i) { ++hits[i]; });
    for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw Error(ErrorKind::kNumerical, "boom");
               }),
               Error);
}

}  // namespace
}  // namespace attrdisc
