#pragma once

// Byte-level corpus: any file read as raw bytes (vocab 256), tail split off
// for validation, uniform random context windows for batching.

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "slw/core.hpp"

namespace slw {

enum class Split { train, val };

struct ByteCorpus {
    std::vector<std::uint8_t> bytes;
    std::size_t train_begin = 0, train_end = 0;  // [begin, end)
    std::size_t val_begin = 0, val_end = 0;

    std::size_t split_begin(Split s) const { return s == Split::train ? train_begin : val_begin; }
    std::size_t split_end(Split s) const { return s == Split::train ? train_end : val_end; }
    std::size_t split_size(Split s) const { return split_end(s) - split_begin(s); }
};

inline ByteCorpus corpus_from_bytes(std::vector<std::uint8_t> bytes, double val_fraction) {
    if (bytes.empty()) throw std::invalid_argument("corpus: empty byte stream");
    if (!(val_fraction > 0.0 && val_fraction < 0.5))
        throw std::invalid_argument("corpus: val_fraction must lie in (0, 0.5)");
    ByteCorpus c;
    c.bytes = std::move(bytes);
    std::size_t val_len = static_cast<std::size_t>(static_cast<double>(c.bytes.size()) * val_fraction);
    c.train_begin = 0;
    c.train_end = c.bytes.size() - val_len;
    c.val_begin = c.train_end;
    c.val_end = c.bytes.size();
    return c;
}

inline ByteCorpus load_corpus(const std::string& path, double val_fraction) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("corpus: cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (in.bad()) throw std::runtime_error("corpus: read failure on '" + path + "'");
    if (bytes.empty()) throw std::invalid_argument("corpus: file '" + path + "' is empty");
    return corpus_from_bytes(std::move(bytes), val_fraction);
}

struct Batch {
    std::vector<std::size_t> inputs;   // B*T token ids
    std::vector<std::size_t> targets;  // inputs shifted by one
};

// B uniformly random windows inside the split; targets are the next byte.
// No window crosses the train/val boundary.
inline Batch sample_batch(const ByteCorpus& corpus, Split split, std::size_t batch,
                          std::size_t seq, Rng& rng) {
    const std::size_t begin = corpus.split_begin(split);
    const std::size_t len = corpus.split_size(split);
    if (len < seq + 1)
        throw std::invalid_argument("sample_batch: split length " + std::to_string(len) +
                                    " < T+1 = " + std::to_string(seq + 1));
    Batch b;
    b.inputs.resize(batch * seq);
    b.targets.resize(batch * seq);
    const std::size_t max_start = len - seq - 1;
    for (std::size_t i = 0; i < batch; ++i) {
        std::size_t off = begin + static_cast<std::size_t>(rng.next_below(max_start + 1));
        for (std::size_t t = 0; t < seq; ++t) {
            b.inputs[i * seq + t] = corpus.bytes[off + t];
            b.targets[i * seq + t] = corpus.bytes[off + t + 1];
        }
    }
    return b;
}

}  // namespace slw
