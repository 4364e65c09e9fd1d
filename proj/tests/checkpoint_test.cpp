#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "bnce/checkpoint.hpp"

using namespace bnce;

namespace {

RunConfig small_config(Architecture a) {
  RunConfig c;
  c.model.architecture = a;
  c.model.vocab_size = 17;
  c.model.embed_dim = 4;
  c.model.recurrent_dim = 5;
  c.model.hidden_dims = {6};
  c.model.bottleneck_dim = 3;
  c.model.context_length = 2;
  c.train.head = HeadType::bnce_adaptive;
  c.train.shared_k = 4;
  return c;
}

TrainState some_state() {
  TrainState s;
  s.epoch = 3;
  s.lr = 0.1;
  s.best_validation = 123.5;
  s.epochs_since_improvement = 2;
  s.step = 999;
  s.words = 123456;
  s.seconds = 12.25;
  s.rng.seed(42);
  s.rng.discard(17);
  return s;
}

template <typename T>
std::string serialized(const RunConfig& cfg, const Model<T>& m, const TrainState& s) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(out, cfg, m, s);
  return out.str();
}

}  // namespace

template <typename T>
class CheckpointRoundTrip : public ::testing::Test {};
using Scalars = ::testing::Types<float, double>;
TYPED_TEST_SUITE(CheckpointRoundTrip, Scalars);

TYPED_TEST(CheckpointRoundTrip, RestoresEverything) {
  for (auto a : {Architecture::ffnn, Architecture::rnn, Architecture::lstm}) {
    const auto cfg = small_config(a);
    Model<TypeParam> m(cfg.model, 7);
    const auto st = some_state();
    std::istringstream in(serialized(cfg, m, st), std::ios::binary);
    auto ck = read_checkpoint<TypeParam>(in);
    EXPECT_EQ(serialize_config(ck.config), serialize_config(cfg));
    EXPECT_TRUE(ck.state == st);
    auto& got = ck.model.params();
    auto want = m.params();
    std::vector<Matrix<TypeParam>> a_list, b_list;
    got.visit([&](const std::string&, Matrix<TypeParam>& x) { a_list.push_back(x); });
    want.visit([&](const std::string&, Matrix<TypeParam>& x) { b_list.push_back(x); });
    ASSERT_EQ(a_list.size(), b_list.size());
    for (std::size_t k = 0; k < a_list.size(); ++k) EXPECT_EQ(a_list[k], b_list[k]);
  }
}

TEST(Checkpoint, FilesAndPrecisionPeek) {
  const auto dir = std::filesystem::temp_directory_path() / "bnce_checkpoint_test";
  std::filesystem::create_directories(dir);
  const auto cfg = small_config(Architecture::rnn);
  save_checkpoint((dir / "f.ckpt").string(), cfg, Model<float>(cfg.model, 1), some_state());
  save_checkpoint((dir / "d.ckpt").string(), cfg, Model<double>(cfg.model, 1), some_state());
  EXPECT_EQ(peek_precision((dir / "f.ckpt").string()), Precision::f32);
  EXPECT_EQ(peek_precision((dir / "d.ckpt").string()), Precision::f64);
  EXPECT_NO_THROW(load_checkpoint<double>((dir / "d.ckpt").string()));
  EXPECT_THROW(load_checkpoint<double>((dir / "f.ckpt").string()), io::FormatError);
  EXPECT_THROW(load_checkpoint<double>((dir / "missing.ckpt").string()), io::FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsCorruptHeaders) {
  const auto cfg = small_config(Architecture::ffnn);
  const auto good = serialized(cfg, Model<double>(cfg.model, 1), some_state());
  auto bad_magic = good;
  bad_magic[0] = 'X';
  auto bad_version = good;
  bad_version[8] = 9;
  auto truncated = good.substr(0, good.size() - 20);
  for (const auto* s : {&bad_magic, &bad_version, &truncated}) {
    std::istringstream in(*s, std::ios::binary);
    EXPECT_THROW(read_checkpoint<double>(in), io::FormatError);
  }
}

TEST(Checkpoint, RejectsShapeMismatch) {
  // Store a model with one vocabulary size under a config claiming another.
  auto cfg = small_config(Architecture::rnn);
  Model<double> m(cfg.model, 1);
  std::string blob = serialized(cfg, m, some_state());
  const std::string from = "vocab_size = 17", to = "vocab_size = 18";
  const auto pos = blob.find(from);
  ASSERT_NE(pos, std::string::npos);
  blob.replace(pos, from.size(), to);
  std::istringstream in(blob, std::ios::binary);
  EXPECT_THROW(read_checkpoint<double>(in), io::FormatError);
}
