#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cdr/io.hpp"
#include "cdr/narrative.hpp"
#include "cdr/trainer.hpp"

using namespace cdr;

namespace {

RunConfig small_config() {
    RunConfig c;
    c.seeds = {1};
    c.epochs = 3;
    c.batch_size = 16;
    c.dims.encoder.d_model = 8;
    c.dims.encoder.n_heads = 2;
    c.dims.encoder.n_blocks = 1;
    c.dims.gate_hidden = 8;
    c.cohort.n_patients = 100;
    c.ood_n_patients = 20;
    return c;
}

struct Fixture {
    RunConfig config = small_config();
    std::vector<PatientRecord> cohort = load_training_cohort(config);
    std::vector<TokenSequence> seqs = encode_cohort(cohort, build_vocabulary());
};

std::vector<std::vector<double>> snapshot(const Model& m) {
    std::vector<std::vector<double>> out;
    for (const auto& nt : m.named()) {
        out.emplace_back(nt.tensor.data().begin(), nt.tensor.data().end());
    }
    return out;
}

std::string temp_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("cdr_test_trainer_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST_CASE("two runs with the same seed give identical parameters and traces") {
    Fixture f;
    const auto a = train_one_seed(f.config, f.cohort, f.seqs, 5);
    const auto b = train_one_seed(f.config, f.cohort, f.seqs, 5);
    CHECK(snapshot(a.model) == snapshot(b.model));
    CHECK(trace_csv(a.trace) == trace_csv(b.trace));
    CHECK(a.split.test == b.split.test);

    const auto c = train_one_seed(f.config, f.cohort, f.seqs, 6);
    CHECK(snapshot(a.model) != snapshot(c.model));
}

TEST_CASE("zero learning rate leaves parameters at their initial values") {
    Fixture f;
    f.config.lr = 0.0;
    f.config.epochs = 1;
    f.config.weights = LossWeights{1.0, 0.0, 0.0, 0.0};
    const auto run = train_one_seed(f.config, f.cohort, f.seqs, 3);
    ModelDims dims = f.config.dims;
    dims.encoder.vocab_size = build_vocabulary().size();
    dims.encoder.seq_len = f.seqs.front().ids.size();
    CHECK(snapshot(run.model) == snapshot(init_model(3, dims)));
}

TEST_CASE("training lowers the total loss and traces every epoch") {
    Fixture f;
    f.config.epochs = 6;
    const auto run = train_one_seed(f.config, f.cohort, f.seqs, 2);
    REQUIRE(run.trace.size() == 6);
    CHECK(run.trace.back().total < run.trace.front().total);
    const std::string csv = trace_csv(run.trace);
    CHECK(csv.rfind("epoch,L_o,L_c,L_co,L_mix,total\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
    for (const auto& t : run.trace) {
        const auto& w = f.config.weights;
        CHECK(t.total == doctest::Approx(w.causal * t.causal + w.confounder * t.confounder + w.joint * t.joint +
                                         w.mix * t.mix)
                             .epsilon(1e-9));
    }
}

TEST_CASE("checkpoint round trip reproduces predictions bit for bit") {
    Fixture f;
    const auto run = train_one_seed(f.config, f.cohort, f.seqs, 4);
    const std::string dir = temp_dir("ckpt");
    save_checkpoint(dir, run.model, f.config.to_json(), 4, f.config.epochs);
    CheckpointInfo info;
    const Model loaded = load_checkpoint(dir, &info);
    CHECK(snapshot(loaded) == snapshot(run.model));
    CHECK(loaded.label_mean == run.model.label_mean);
    CHECK(loaded.label_sd == run.model.label_sd);
    CHECK(info.manifest.at("seed") == 4);
    CHECK(info.manifest.at("byte_order") == "little");
    CHECK(predict_indices(loaded, f.seqs, run.split.test) == predict_indices(run.model, f.seqs, run.split.test));

    // Saving the loaded model again gives identical bytes.
    const std::string dir2 = temp_dir("ckpt2");
    save_checkpoint(dir2, loaded, f.config.to_json(), 4, f.config.epochs);
    CHECK(slurp(dir + "/checkpoint.bin") == slurp(dir2 + "/checkpoint.bin"));
    CHECK(slurp(dir + "/checkpoint.json") == slurp(dir2 + "/checkpoint.json"));
}

TEST_CASE("corrupt or missing checkpoints are reported") {
    Fixture f;
    const auto run = train_one_seed(f.config, f.cohort, f.seqs, 4);
    CHECK_THROWS_AS(load_checkpoint(temp_dir("missing")), IoError);

    const std::string dir = temp_dir("short");
    save_checkpoint(dir, run.model, f.config.to_json(), 4, 1);
    const std::string payload = slurp(dir + "/checkpoint.bin");
    write_binary_file(dir + "/checkpoint.bin", payload.substr(0, payload.size() - 8));
    CHECK_THROWS_AS(load_checkpoint(dir), std::runtime_error);

    const std::string dir2 = temp_dir("badjson");
    save_checkpoint(dir2, run.model, f.config.to_json(), 4, 1);
    write_text_file(dir2 + "/checkpoint.json", "{\"format\": ");
    CHECK_THROWS_AS(load_checkpoint(dir2), std::runtime_error);
}

TEST_CASE("huge learning rates surface as divergence naming the seed") {
    Fixture f;
    f.config.lr = 1e12;
    f.config.momentum = 0.0;
    f.config.epochs = 20;
    try {
        train_one_seed(f.config, f.cohort, f.seqs, 9);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.seed == 9);
        CHECK(e.epoch >= 1);
        CHECK(e.step >= 1);
        CHECK(std::string(e.what()).find("seed 9") != std::string::npos);
    }
}

TEST_CASE("config JSON round trips and overrides parse values") {
    RunConfig c = small_config();
    c.seeds = {3, 8};
    c.mix.tau = 0.3;
    c.dims.combine = CombineMode::concat;
    c.confounder_objective = ConfounderObjective::mean;
    const RunConfig back = RunConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
    CHECK(back.to_json().dump() == c.to_json().dump());

    RunConfig d;
    d.apply_override("lr=0.01");
    d.apply_override("seeds=[7,9]");
    d.apply_override("combine=concat");
    CHECK(d.lr == 0.01);
    CHECK(d.seeds == std::vector<std::uint64_t>{7, 9});
    CHECK(d.dims.combine == CombineMode::concat);
    CHECK_THROWS_AS(d.apply_override("lr"), ConfigError);
    CHECK_THROWS_AS(d.apply_override("n_patient=10"), ConfigError);
}

TEST_CASE("invalid configurations name the offending key") {
    auto rejects = [](const std::string& text, const std::string& key) {
        try {
            RunConfig::from_json(nlohmann::json::parse(text));
            return false;
        } catch (const ConfigError& e) {
            return std::string(e.what()).find(key) != std::string::npos;
        }
    };
    CHECK(rejects(R"({"learning_rate": 0.1})", "learning_rate"));
    CHECK(rejects(R"({"learning_rate": 0.1})", "valid keys"));
    CHECK(rejects(R"({"seeds": []})", "seeds"));
    CHECK(rejects(R"({"seeds": [1, 1]})", "seeds"));
    CHECK(rejects(R"({"lr": -1})", "lr"));
    CHECK(rejects(R"({"batch_size": 1})", "batch_size"));
    CHECK(rejects(R"({"tau": 0})", "tau"));
    CHECK(rejects(R"({"d_model": 10, "n_heads": 4})", "d_model"));
    CHECK(rejects(R"({"epochs": "many"})", "epochs"));
    CHECK_NOTHROW(RunConfig::from_json(nlohmann::json::parse(R"({"batch_size": 1, "lambda_mix": 0, "lambda_co": 0})")));
}

TEST_CASE("seed order of the protocol does not change per-seed results") {
    RunConfig c = small_config();
    c.epochs = 1;
    c.seeds = {11, 12};
    const auto ab = run_protocol(c, "", "causal_network");
    c.seeds = {12, 11};
    const auto ba = run_protocol(c, "", "causal_network");
    REQUIRE(ab.test.rows.size() == 2);
    CHECK(ab.test.rows[0].rmse == ba.test.rows[1].rmse);
    CHECK(ab.ood.rows[1].rmse == ba.ood.rows[0].rmse);
    CHECK(ab.test.rows[0].seed == 11);
    CHECK(ab.runs[0].split.test.size() == 20);
}

TEST_CASE("aggregate over seeds uses the sample standard deviation") {
    MetricsReport r;
    for (std::uint64_t s : {1u, 2u}) {
        SeedMetrics m;
        m.seed = s;
        m.mse = s == 1 ? 16.0 : 36.0;
        m.rmse = s == 1 ? 4.0 : 6.0;
        r.rows.push_back(m);
    }
    const auto agg = r.aggregate();
    CHECK(agg.at("rmse").mean == doctest::Approx(5.0));
    CHECK(agg.at("rmse").sd == doctest::Approx(std::sqrt(2.0)));
    r.rows.pop_back();
    CHECK(r.aggregate().at("rmse").sd == 0.0);
    CHECK(r.aggregate().at("rmse").single);
}

TEST_CASE("split depends only on the cohort, fraction and seed") {
    Fixture f;
    RunConfig other = f.config;
    other.lr = 0.5;
    other.dims.encoder.d_model = 16;
    const auto a = train_one_seed(f.config, f.cohort, f.seqs, 21);
    other.epochs = 1;
    const auto b = train_one_seed(other, f.cohort, f.seqs, 21);
    CHECK(a.split.train == b.split.train);
    CHECK(a.split.test == split_stratified(f.cohort, 0.8, 21).test);
    CHECK(a.split.train.size() == 80);
}

TEST_CASE("stored seed-42 trace has a non-increasing five-epoch moving average") {
    const std::string csv = read_text_file(CDR_DATA_DIR "/golden_trace_seed42.csv");
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,L_o,L_c,L_co,L_mix,total");
    std::vector<double> total;
    while (std::getline(in, line)) {
        total.push_back(std::stod(line.substr(line.rfind(',') + 1)));
    }
    REQUIRE(total.size() == 30);
    double prev = INFINITY;
    for (std::size_t e = 4; e < total.size(); ++e) {
        double avg = 0.0;
        for (std::size_t k = e - 4; k <= e; ++k) {
            avg += total[k] / 5.0;
        }
        INFO("epoch " << e + 1);
        CHECK(avg <= prev);
        prev = avg;
    }
}
