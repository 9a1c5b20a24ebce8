#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "emofuse/emofuse.hpp"

namespace testing_helpers {

inline emofuse::Tensor random_tensor(emofuse::Shape shape, std::uint64_t seed, double scale = 1.0,
                                     bool requires_grad = true) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    std::vector<double> v(emofuse::shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return emofuse::Tensor(std::move(shape), std::move(v), requires_grad);
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("emofuse_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline emofuse::EncoderConfig tiny_config(std::size_t vocab_size = 64) {
    emofuse::EncoderConfig c;
    c.num_layers = 1;
    c.hidden_dim = 8;
    c.num_heads = 2;
    c.ffn_dim = 16;
    c.vocab_size = vocab_size;
    c.max_len = 12;
    c.dropout_rate = 0.0;
    return c;
}

// Hand-built sequence: [CLS] ids... [SEP] then padding.
inline emofuse::TokenizedSequence make_sequence(const std::vector<std::size_t>& content, std::size_t max_len) {
    emofuse::TokenizedSequence s;
    s.ids.assign(max_len, emofuse::Vocabulary::pad_id);
    s.mask.assign(max_len, 0);
    s.ids[0] = emofuse::Vocabulary::cls_id;
    for (std::size_t i = 0; i < content.size(); ++i) s.ids[i + 1] = content[i];
    s.ids[content.size() + 1] = emofuse::Vocabulary::sep_id;
    s.true_length = content.size() + 2;
    for (std::size_t i = 0; i < s.true_length; ++i) s.mask[i] = 1;
    return s;
}

}  // namespace testing_helpers
