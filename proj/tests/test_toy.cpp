#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "cpnet/errors.hpp"
#include "cpnet/model.hpp"
#include "cpnet/toy_data.hpp"
#include "cpnet/train.hpp"
#include "oracles.hpp"

using namespace cpnet;
using support::Rng;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("cpnet_test_" + name)).string();
}

Parameter& named(ToyModel& m, const std::string& name) {
  for (Parameter* p : m.parameters())
    if (p->name == name) return *p;
  FAIL("no parameter " << name);
  throw 0;
}

ToyDataset tiny_dataset(std::uint64_t seed) { return generate_toy_dataset(seed, 8, 4); }

Tensor random_videos(Rng& rng, std::size_t n, std::size_t t, std::size_t h, std::size_t w) {
  return support::random_tensor({n, t, h, w}, rng, 0.0f, 1.0f);
}

}  // namespace

TEST_SUITE("toy dataset") {
  TEST_CASE("default counts with exact label balance") {
    const ToyDataset ds = generate_toy_dataset(0);
    REQUIRE(ds.train.size() == 1000);
    REQUIRE(ds.val.size() == 200);
    for (const auto* split : {&ds.train, &ds.val}) {
      std::array<std::size_t, 4> counts{};
      for (const auto& s : *split) ++counts[static_cast<std::size_t>(s.label)];
      for (auto c : counts) CHECK(c == split->size() / 4);
    }
  }

  TEST_CASE("every sample satisfies the motion invariants over several seeds") {
    for (std::uint64_t seed : {1, 2}) {
      const ToyDataset ds = generate_toy_dataset(seed);
      for (const auto* split : {&ds.train, &ds.val})
        for (const auto& s : *split) {
          const std::string bad = oracle::sample_violation(s);
          CHECK_MESSAGE(bad.empty(), bad);
        }
    }
  }

  TEST_CASE("up moves strictly decrease the row and every frame sums to 4") {
    const ToyDataset ds = generate_toy_dataset(3, 40, 4);
    for (const auto& s : ds.train) {
      int prev_row = 1000;
      for (std::size_t t = 0; t < kToyFrames; ++t) {
        int sum = 0, row = -1;
        for (std::size_t y = 0; y < kToyCanvas; ++y)
          for (std::size_t x = 0; x < kToyCanvas; ++x) {
            sum += s.at(t, y, x);
            if (s.at(t, y, x) && row < 0) row = static_cast<int>(y);
          }
        CHECK(sum == 4);
        if (s.label == Direction::Up) {
          CHECK(row < prev_row);
          prev_row = row;
        }
      }
    }
  }

  TEST_CASE("all three step lengths occur") {
    const ToyDataset ds = generate_toy_dataset(4);
    std::set<int> steps;
    for (const auto& s : ds.train) {
      auto top_left = [&](std::size_t t) {
        for (std::size_t y = 0; y < kToyCanvas; ++y)
          for (std::size_t x = 0; x < kToyCanvas; ++x)
            if (s.at(t, y, x)) return std::pair<int, int>(static_cast<int>(y), static_cast<int>(x));
        return std::pair<int, int>(-1, -1);
      };
      for (std::size_t t = 1; t < kToyFrames; ++t) {
        const auto a = top_left(t - 1), b = top_left(t);
        steps.insert(std::abs(b.first - a.first) + std::abs(b.second - a.second));
      }
    }
    CHECK(steps == std::set<int>{7, 8, 9});
  }

  TEST_CASE("same seed is bitwise identical, another seed differs") {
    const ToyDataset a = generate_toy_dataset(5, 40, 8), b = generate_toy_dataset(5, 40, 8);
    CHECK(a.train == b.train);
    CHECK(a.val == b.val);
    CHECK_FALSE(generate_toy_dataset(6, 40, 8).train == a.train);
  }

  TEST_CASE("split sizes must be multiples of the class count") {
    CHECK_THROWS_AS(generate_toy_dataset(0, 10, 8), ValidationError);
  }

  TEST_CASE("CPDS round trip and byte layout") {
    const ToyDataset ds = generate_toy_dataset(7, 12, 4);
    const std::string path = temp_path("round.cpds");
    save_cpds(path, ds);
    CHECK(std::filesystem::file_size(path) == 4 + 4 + 4 + 16 * (1 + ToySample::kPixels));
    std::ifstream in(path, std::ios::binary);
    char head[13] = {};
    in.read(head, 13);
    CHECK(std::string(head, 4) == "CPDS");
    CHECK(static_cast<unsigned char>(head[4]) == 12);
    CHECK(static_cast<unsigned char>(head[8]) == 4);
    CHECK(static_cast<unsigned char>(head[12]) == static_cast<unsigned char>(ds.train[0].label));
    const ToyDataset back = load_cpds(path);
    CHECK(back.train == ds.train);
    CHECK(back.val == ds.val);
    std::filesystem::remove(path);
  }

  TEST_CASE("loading a missing or corrupt CPDS file fails with the path") {
    CHECK_THROWS_WITH_AS(load_cpds(temp_path("absent.cpds")), doctest::Contains("absent.cpds"), IoError);
    const std::string path = temp_path("bad.cpds");
    std::ofstream(path) << "CPDX";
    CHECK_THROWS_AS(load_cpds(path), IoError);
    std::ofstream(path, std::ios::trunc) << "CPDS\x04";
    CHECK_THROWS_AS(load_cpds(path), IoError);
    std::filesystem::remove(path);
  }

  TEST_CASE("batches are [N, T, H, W] with white as 1") {
    const ToyDataset ds = generate_toy_dataset(8, 8, 4);
    const Tensor b = make_batch(ds.train);
    CHECK(b.shape() == Shape{8, 4, 32, 32});
    double total = 0;
    for (float v : b.data()) {
      CHECK((v == 0.0f || v == 1.0f));
      total += v;
    }
    CHECK(total == 8 * 4 * 4);
    const std::vector<std::size_t> order{3, 1};
    const Tensor two = make_batch(ds.train, order);
    CHECK(std::equal(two.ptr(), two.ptr() + ToySample::kPixels, b.ptr() + 3 * ToySample::kPixels));
  }

  TEST_CASE("split names") {
    CHECK(parse_split("train") == Split::Train);
    CHECK(parse_split("val") == Split::Val);
    CHECK_THROWS_AS(parse_split("test"), ValidationError);
  }
}

TEST_SUITE("toy model") {
  TEST_CASE("fresh CPNet logits equal C2D logits bitwise") {
    Rng rng(1);
    for (std::uint64_t seed : {0, 1, 2}) {
      ToyModel cp = ToyModel::cpnet(8, seed), c2 = ToyModel::c2d(seed);
      for (int n = 0; n < 3; ++n) {
        const Tensor x = random_videos(rng, 2, 4, 8, 8);
        CHECK(bitwise_equal(cp.logits(x, Mode::Eval), c2.logits(x, Mode::Eval)));
        CHECK(bitwise_equal(cp.logits(x, Mode::Train), c2.logits(x, Mode::Train)));
      }
    }
  }

  TEST_CASE("parameter count equals the layer-by-layer sum") {
    const std::size_t conv1 = 16 * 1 * 9 + 16, conv2 = 16 * 16 * 9 + 16, bn = 2 * 16, fc = 16 * 4 + 4;
    const std::size_t c2d = conv1 + bn + conv2 + bn + fc;
    const std::size_t mlp = (35 * 4 + 4) + (4 * 8 + 8) + (8 * 16 + 16);
    const std::size_t mlp_bn = 2 * (4 + 8 + 16);
    CHECK(ToyModel::c2d(0).parameter_count() == c2d);
    CHECK(ToyModel::cpnet(8, 0).parameter_count() == c2d + mlp + mlp_bn);
  }

  TEST_CASE("batch of 8 gives 8x4 logits") {
    Rng rng(2);
    const Tensor x = random_videos(rng, 8, 4, 32, 32);
    CHECK(ToyModel::c2d(0).logits(x).shape() == Shape{8, 4});
    CHECK(ToyModel::cpnet(8, 0).logits(x).shape() == Shape{8, 4});
  }

  TEST_CASE("two stacked 3x3 convs see a 5x5 window") {
    CHECK(ToyModel::receptive_field() == 5);
    Rng rng(3);
    Tensor impulse({1, 1, 11, 11});
    impulse[5 * 11 + 5] = 1.0f;
    Tape tape;
    Var h = conv2d(tape.constant(impulse), tape.constant(support::random_tensor({1, 1, 3, 3}, rng, 0.5f, 1.0f)),
                   tape.constant(Tensor({1})));
    h = conv2d(h, tape.constant(support::random_tensor({1, 1, 3, 3}, rng, 0.5f, 1.0f)), tape.constant(Tensor({1})));
    std::size_t lo_y = 11, hi_y = 0, lo_x = 11, hi_x = 0;
    for (std::size_t y = 0; y < 11; ++y)
      for (std::size_t x = 0; x < 11; ++x)
        if (h.value()[y * 11 + x] != 0.0f) {
          lo_y = std::min(lo_y, y), hi_y = std::max(hi_y, y);
          lo_x = std::min(lo_x, x), hi_x = std::max(hi_x, x);
        }
    CHECK(hi_y - lo_y + 1 == 5);
    CHECK(hi_x - lo_x + 1 == 5);
  }

  TEST_CASE("zero input gives the fc bias") {
    for (ToyModel m : {ToyModel::c2d(4), ToyModel::cpnet(4, 4)}) {
      named(m, "fc.bias").value = Tensor({4}, std::vector<float>{0.5f, -1.0f, 2.0f, 0.25f});
      const Tensor y = m.logits(Tensor({3, 4, 8, 8}));
      for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t c = 0; c < 4; ++c) CHECK(y[n * 4 + c] == named(m, "fc.bias").value[c]);
    }
  }

  TEST_CASE("invalid k and input rank are rejected") {
    CHECK_THROWS_AS(ToyModel::cpnet(0, 0), ValidationError);
    CHECK_THROWS_AS(ToyModel::cpnet(3 * 1024 + 1, 0), ValidationError);
    ToyModel m = ToyModel::cpnet(8, 0);
    CHECK_THROWS_AS(m.logits(Tensor({2, 4, 8})), ValidationError);
    CHECK_THROWS_AS(m.logits(Tensor({1, 2, 2, 2})), ValidationError);  // k=8 > (T-1)HW = 4
  }

  TEST_CASE("both backends give the same CPNet logits") {
    Rng rng(5);
    ToyModel m = ToyModel::cpnet(3, 5);
    m.cp()->final_gamma().value.fill(1.0f);
    const Tensor x = random_videos(rng, 2, 4, 6, 6);
    m.set_backend(KnnBackend::Brute);
    const Tensor a = m.logits(x);
    m.set_backend(KnnBackend::Tree);
    CHECK(bitwise_equal(a, m.logits(x)));
  }

  TEST_CASE("checkpoint round trip restores kind, k and logits") {
    Rng rng(6);
    ToyModel m = ToyModel::cpnet(5, 6);
    for (Parameter* p : m.parameters()) p->value = support::random_tensor(p->value.shape(), rng, -0.5f, 0.5f);
    const std::string path = temp_path("model.cpt");
    m.save(path);
    ToyModel back = ToyModel::load(path);
    CHECK(back.kind() == ModelKind::CPNet);
    CHECK(back.neighbors() == 5);
    const Tensor x = random_videos(rng, 2, 4, 8, 8);
    CHECK(bitwise_equal(m.logits(x), back.logits(x)));

    ToyModel c = ToyModel::c2d(1);
    c.save(path);
    CHECK(ToyModel::load(path).kind() == ModelKind::C2D);

    std::ofstream(path, std::ios::trunc) << "junk";
    CHECK_THROWS_AS(ToyModel::load(path), IoError);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(ToyModel::load(path), IoError);
  }

  TEST_CASE("model names") {
    CHECK(parse_model_kind("cpnet") == ModelKind::CPNet);
    CHECK(parse_model_kind("c2d") == ModelKind::C2D);
    CHECK_THROWS_AS(parse_model_kind("i3d"), ValidationError);
  }
}

TEST_SUITE("training") {
  TEST_CASE("top-1 accuracy equals a hand count") {
    // rows 0..9: arg-max column per row is 0,1,2,3,0,1,2,3,0,0 (row 9 ties 0 and 2)
    Tensor logits({10, 4}, -1.0f);
    const std::array<std::size_t, 10> arg{0, 1, 2, 3, 0, 1, 2, 3, 0, 0};
    for (std::size_t r = 0; r < 10; ++r) logits[r * 4 + arg[r]] = 1.0f;
    logits[9 * 4 + 2] = 1.0f;
    const std::vector<int> labels{0, 1, 2, 0, 0, 3, 2, 3, 1, 2};
    CHECK(top1_accuracy(logits, labels) == doctest::Approx(0.6));
    CHECK_THROWS_AS(top1_accuracy(Tensor({1, 4}), std::vector<int>{}), ValidationError);
  }

  TEST_CASE("a model that always names the label scores 1") {
    const ToyDataset ds = tiny_dataset(1);
    const auto labels = labels_of(ds.train);
    Tensor logits({labels.size(), 4});
    for (std::size_t r = 0; r < labels.size(); ++r) logits[r * 4 + static_cast<std::size_t>(labels[r])] = 5.0f;
    CHECK(top1_accuracy(logits, labels) == 1.0);
  }

  TEST_CASE("a fresh model evaluates to a valid, deterministic accuracy") {
    const ToyDataset ds = generate_toy_dataset(2, 4, 40);
    ToyModel m = ToyModel::c2d(2);
    const Evaluation a = evaluate(m, ds.val), b = evaluate(m, ds.val, 7);
    CHECK((a.accuracy >= 0.0 && a.accuracy <= 1.0));
    CHECK(a.accuracy == b.accuracy);
    CHECK(std::isfinite(a.loss));
    CHECK_THROWS_AS(evaluate(m, std::vector<ToySample>{}), ValidationError);
  }

  TEST_CASE("learning rate 0 leaves parameters bitwise unchanged") {
    const ToyDataset ds = tiny_dataset(3);
    ToyModel m = ToyModel::cpnet(4, 3);
    std::vector<Tensor> before;
    for (Parameter* p : m.parameters()) before.push_back(p->value);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.learning_rate = 0.0f;
    train(m, ds, cfg);
    const auto after = m.parameters();
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(bitwise_equal(before[i], after[i]->value));
  }

  TEST_CASE("Adam moves parameters against the gradient") {
    Parameter p("p", Tensor({2}, std::vector<float>{1.0f, -1.0f}));
    Adam opt({&p}, 0.1f, 0.9f, 0.999f, 1e-8f);
    opt.zero_grad();
    p.grad = Tensor({2}, std::vector<float>{2.0f, -3.0f});
    opt.step();
    // first bias-corrected step has magnitude lr
    CHECK(p.value[0] == doctest::Approx(0.9f));
    CHECK(p.value[1] == doctest::Approx(-0.9f));
  }

  TEST_CASE("same seed and config give a bitwise identical history") {
    const ToyDataset ds = tiny_dataset(4);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    for (int kind = 0; kind < 2; ++kind) {
      ToyModel a = kind ? ToyModel::cpnet(4, 9) : ToyModel::c2d(9);
      ToyModel b = kind ? ToyModel::cpnet(4, 9) : ToyModel::c2d(9);
      const auto ha = train(a, ds, cfg).history, hb = train(b, ds, cfg).history;
      REQUIRE(ha.size() == hb.size());
      for (std::size_t e = 0; e < ha.size(); ++e) {
        CHECK(ha[e].train_loss == hb[e].train_loss);
        CHECK(ha[e].val_loss == hb[e].val_loss);
        CHECK(ha[e].train_accuracy == hb[e].train_accuracy);
      }
      const Tensor x = make_batch(ds.val);
      CHECK(bitwise_equal(a.logits(x), b.logits(x)));
    }
  }

  TEST_CASE("the returned model is the best validation epoch") {
    const ToyDataset ds = tiny_dataset(5);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    ToyModel m = ToyModel::c2d(5);
    std::vector<EpochMetrics> seen;
    const TrainResult r = train(m, ds, cfg, [&](const EpochMetrics& e) { seen.push_back(e); });
    CHECK(seen.size() == r.history.size());
    for (const auto& e : r.history) CHECK(e.val_accuracy <= r.best().val_accuracy);
    CHECK(evaluate(m, ds.val).accuracy == r.best().val_accuracy);
  }

  TEST_CASE("early stop ends training once train accuracy reaches the threshold") {
    const ToyDataset ds = tiny_dataset(6);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 4;
    cfg.early_stop_train_accuracy = 0.0;
    ToyModel m = ToyModel::c2d(6);
    CHECK(train(m, ds, cfg).history.size() == 1);
  }

  TEST_CASE("divergence raises a numeric error") {
    const ToyDataset ds = tiny_dataset(7);
    ToyModel m = ToyModel::c2d(7);
    for (Parameter* p : m.parameters()) p->value.fill(std::numeric_limits<float>::quiet_NaN());
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    CHECK_THROWS_AS(train(m, ds, cfg), NumericError);
  }

  TEST_CASE("invalid configs are rejected") {
    TrainConfig cfg;
    cfg.batch_size = 1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = TrainConfig{};
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = TrainConfig{};
    cfg.learning_rate = -1.0f;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = TrainConfig{};
    cfg.beta2 = 1.0f;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
  }

  TEST_CASE("metrics CSV has two rows per epoch") {
    const std::string path = temp_path("metrics.csv");
    write_metrics_csv(path, {EpochMetrics{1, 1.5, 0.25, 1.25, 0.5}});
    std::ifstream in(path);
    std::string header, a, b;
    std::getline(in, header);
    std::getline(in, a);
    std::getline(in, b);
    CHECK(header == "epoch,split,loss,accuracy");
    CHECK(a == "1,train,1.5,0.25");
    CHECK(b == "1,val,1.25,0.5");
    std::filesystem::remove(path);
  }
}
