#include "cdr/model_check.hpp"

#include "cdr/narrative.hpp"
#include "cdr/rng.hpp"

namespace cdr {

std::vector<gradcheck::Result> check_model_gradients(const ModelCheckSettings& s, const gradcheck::Options& options) {
    const Vocabulary vocab = build_vocabulary();
    Rng rng(s.seed);

    ModelDims dims;
    dims.encoder.vocab_size = vocab.size();
    dims.encoder.seq_len = s.seq_len;
    dims.encoder.d_model = s.d_model;
    dims.encoder.n_blocks = s.n_blocks;
    dims.encoder.n_heads = s.n_heads;
    dims.gate_hidden = s.gate_hidden;
    dims.combine = s.combine;
    const Model model = init_model(s.seed, dims);

    // Random sequences of varying length, BOS first, PAD after.
    std::vector<TokenSequence> seqs(s.batch);
    for (std::size_t b = 0; b < s.batch; ++b) {
        const std::size_t len = s.seq_len - (b * s.seq_len) / (2 * s.batch);
        auto& seq = seqs[b];
        for (std::size_t t = 0; t < s.seq_len; ++t) {
            int id = Vocabulary::kPad;
            if (t == 0) {
                id = Vocabulary::kBos;
            } else if (t < len) {
                id = static_cast<int>(2 + rng.index(vocab.size() - 2));
            }
            seq.ids.push_back(id);
            seq.categories.push_back(vocab.entry(id).category);
        }
    }
    const PackedBatch batch = pack(seqs);
    const auto partners = sample_partners(s.batch, s.K, rng);
    std::vector<double> y;
    for (std::size_t b = 0; b < s.batch; ++b) {
        y.push_back(rng.normal());
    }
    MixSettings mix_settings;
    mix_settings.K = s.K;
    mix_settings.tau = s.tau;
    const LossWeights weights;

    auto loss = [&]() {
        const auto out = forward_batch(model, batch, partners);
        return total_loss(out, y, weights, mix_settings, s.objective, 0.0).total;
    };
    std::vector<gradcheck::Result> results;
    for (const auto& nt : model.named()) {
        results.push_back(gradcheck::check(nt.name, {nt.tensor}, loss, options));
    }
    return results;
}

}  // namespace cdr
