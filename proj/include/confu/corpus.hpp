#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "confu/error.hpp"
#include "confu/rng.hpp"

namespace confu {

// Byte-level vocabulary: 256 raw bytes plus BOS/EOS specials.
constexpr int kBosToken = 256;
constexpr int kEosToken = 257;
constexpr std::size_t kByteVocabSize = 258;

inline std::vector<int> tokenize_bytes(const std::string& text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<int>(c));
  return out;
}

inline std::string detokenize_bytes(const std::vector<int>& tokens) {
  std::string out;
  for (int t : tokens)
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  return out;
}

struct Corpus {
  std::vector<std::vector<int>> sequences;  // each BOS-prefixed, fixed length
  std::size_t seq_len = 0;
};

// Fixed-length training sequences from raw text: BOS + (seq_len-1) bytes per
// sequence; a ragged tail shorter than half a sequence is dropped, otherwise
// it is completed by wrapping to the start of the text.
inline Corpus corpus_from_text(const std::string& text, std::size_t seq_len) {
  if (text.empty()) throw ConfigError("corpus: empty text");
  if (seq_len < 8) throw ConfigError("corpus: sequence length too small");
  Corpus c;
  c.seq_len = seq_len;
  std::size_t body = seq_len - 1;
  for (std::size_t start = 0; start + body / 2 <= text.size(); start += body) {
    std::vector<int> seq;
    seq.push_back(kBosToken);
    for (std::size_t i = 0; i < body; ++i) seq.push_back(
        static_cast<int>(static_cast<unsigned char>(text[(start + i) % text.size()])));
    c.sequences.push_back(std::move(seq));
    if (start + body >= text.size()) break;
  }
  if (c.sequences.empty()) throw ConfigError("corpus: text shorter than one sequence");
  return c;
}

inline Corpus corpus_from_file(const std::string& path, std::size_t seq_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("corpus: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return corpus_from_text(text, seq_len);
}

// ---------------------------------------------------------------------------
// Synthetic topic corpus. Each sequence draws one latent topic and follows
// that topic's Markov chain over a SHARED symbol alphabet, so the topic is
// ambiguous from any single token but inferable from the prefix. That makes a
// compact summary of the generation direction genuinely useful to a drafter.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t n_topics = 2;
  std::size_t n_symbols = 10;     // shared alphabet: bytes 'a', 'a'+1, ...
  std::size_t seq_len = 96;       // including BOS
  std::size_t n_sequences = 64;
  double main_prob = 0.75;        // probability of the topic's primary successor
  std::size_t phase_len = 0;      // >0: successor tables switch every phase_len positions
  std::uint64_t seed = 1;

  void validate() const {
    if (n_topics < 1 || n_symbols < 3 || seq_len < 8 || n_sequences < 1)
      throw ConfigError("synthetic spec: degenerate sizes");
    if (main_prob <= 0.0 || main_prob >= 1.0)
      throw ConfigError("synthetic spec: main_prob in (0,1)");
  }
};

struct SyntheticCorpus {
  Corpus corpus;
  std::vector<std::size_t> topics;  // per sequence, constant by construction
};

inline SyntheticCorpus synthetic_corpus(const SyntheticSpec& spec) {
  spec.validate();
  SplitMix rng(mix64(spec.seed, 0xc0de));

  // Per-(topic, phase) successor tables: a primary and a secondary next symbol
  // per current symbol, drawn as seeded permutations so topics disagree. With
  // phase_len > 0 the tables alternate along the sequence, so the direction of
  // generation depends on position as well as topic.
  std::size_t n_phases = spec.phase_len > 0 ? 2 : 1;
  std::vector<std::vector<std::size_t>> primary(spec.n_topics * n_phases),
      secondary(spec.n_topics * n_phases);
  for (std::size_t t = 0; t < primary.size(); ++t) {
    std::vector<std::size_t> perm(spec.n_symbols);
    for (std::size_t i = 0; i < spec.n_symbols; ++i) perm[i] = i;
    for (std::size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[rng.below(i)]);
    primary[t] = perm;
    secondary[t].resize(spec.n_symbols);
    for (std::size_t i = 0; i < spec.n_symbols; ++i)
      secondary[t][i] = (perm[i] + 1 + rng.below(spec.n_symbols - 1)) % spec.n_symbols;
  }

  SyntheticCorpus out;
  out.corpus.seq_len = spec.seq_len;
  for (std::size_t s = 0; s < spec.n_sequences; ++s) {
    std::size_t topic = rng.below(spec.n_topics);
    out.topics.push_back(topic);
    std::vector<int> seq;
    seq.push_back(kBosToken);
    std::size_t sym = rng.below(spec.n_symbols);
    for (std::size_t i = 1; i < spec.seq_len; ++i) {
      seq.push_back(static_cast<int>('a') + static_cast<int>(sym));
      std::size_t phase = spec.phase_len > 0 ? (i / spec.phase_len) % 2 : 0;
      std::size_t table = topic * n_phases + phase;
      sym = rng.uniform() < spec.main_prob ? primary[table][sym] : secondary[table][sym];
    }
    out.corpus.sequences.push_back(std::move(seq));
  }
  return out;
}

}  // namespace confu
