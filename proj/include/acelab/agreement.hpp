#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "acelab/rng.hpp"
#include "acelab/train.hpp"
#include "acelab/transformer.hpp"

namespace acelab {

// ---------------------------------------------------------------------------
// English agreement prompt corpus
// ---------------------------------------------------------------------------

// Word inventory for the prompt generator. Counts are the contract: 10 head
// pairs x 4 attractor pairs x 3 connectors per template yields 120 prompts
// per (template, number) cell and 1200 total.
struct AgreementVocab {
  // {singular, plural}
  std::vector<std::array<std::string, 2>> heads = {
      {"key", "keys"},       {"child", "children"}, {"teacher", "teachers"},
      {"dog", "dogs"},       {"book", "books"},     {"house", "houses"},
      {"pilot", "pilots"},   {"flower", "flowers"}, {"car", "cars"},
      {"student", "students"}};
  std::vector<std::array<std::string, 2>> attractors = {
      {"cabinet", "cabinets"}, {"box", "boxes"}, {"street", "streets"}, {"garden", "gardens"}};
  std::vector<std::string> connectors = {"to the", "near the", "next to the"};
  std::vector<std::string> relative_linkers = {"that guards the", "that opens the",
                                               "that matches the"};
};

enum class AgreementTemplate : int {
  kBase = 0,        // "The key to the cabinets"
  kFrontPadded = 1, // "In this ancient kingdom, the key to the cabinets"
  kBackPadded = 2,  // "The key to the cabinets in the old kingdom"
  kExistential = 3, // "There key near the boxes" (deliberately ungrammatical)
  kRelative = 4,    // "The key that guards the cabinets"
};

struct AgreementPrompt {
  std::string text;     // ends at the verb decision point
  int label = 0;        // 0 = singular head, 1 = plural head
  int template_id = 0;
  int tense = 0;        // 1 when prefixed with "In the past,"
};

struct AgreementCorpus {
  std::vector<AgreementPrompt> prompts;
  std::vector<int> train_idx;
  std::vector<int> test_idx;
};

namespace detail {

inline std::string lower_first(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(s[0])));
  return s;
}

inline std::string render_prompt(AgreementTemplate tpl, const std::string& head,
                                 const std::string& attr, const std::string& link) {
  switch (tpl) {
    case AgreementTemplate::kBase:
      return "The " + head + " " + link + " " + attr;
    case AgreementTemplate::kFrontPadded:
      return "In this ancient kingdom, the " + head + " " + link + " " + attr;
    case AgreementTemplate::kBackPadded:
      return "The " + head + " " + link + " " + attr + " in the old kingdom";
    case AgreementTemplate::kExistential:
      return "There " + head + " " + link + " " + attr;
    case AgreementTemplate::kRelative:
      return "The " + head + " " + link + " " + attr;
  }
  throw std::logic_error("unknown template");
}

}  // namespace detail

// 1200 prompts: 600 singular / 600 plural, five templates, attractor number
// always opposite the head, half prefixed with "In the past,". Deterministic
// given the seed (the seed only drives the train/test split).
inline AgreementCorpus agreement_prompts(std::uint64_t seed,
                                         const AgreementVocab& vocab = AgreementVocab()) {
  AgreementCorpus corpus;
  for (int tpl = 0; tpl < 5; ++tpl) {
    const bool relative = tpl == static_cast<int>(AgreementTemplate::kRelative);
    const auto& links = relative ? vocab.relative_linkers : vocab.connectors;
    for (int number = 0; number < 2; ++number) {
      int combo = 0;
      for (const auto& head : vocab.heads) {
        for (const auto& attr : vocab.attractors) {
          for (const std::string& link : links) {
            AgreementPrompt p;
            p.label = number;
            p.template_id = tpl;
            p.tense = combo % 2;
            std::string body = detail::render_prompt(static_cast<AgreementTemplate>(tpl),
                                                     head[number], attr[1 - number], link);
            p.text = p.tense ? "In the past, " + detail::lower_first(body) : body;
            corpus.prompts.push_back(std::move(p));
            ++combo;
          }
        }
      }
    }
  }
  std::vector<int> idx(corpus.prompts.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  Rng rng(seed);
  rng.shuffle(idx);
  const int half = static_cast<int>(idx.size()) / 2;
  corpus.train_idx.assign(idx.begin(), idx.begin() + half);
  corpus.test_idx.assign(idx.begin() + half, idx.end());
  std::sort(corpus.train_idx.begin(), corpus.train_idx.end());
  std::sort(corpus.test_idx.begin(), corpus.test_idx.end());
  return corpus;
}

inline void write_corpus_tsv(const AgreementCorpus& corpus, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("corpus: cannot open for write: " + path);
  for (const AgreementPrompt& p : corpus.prompts)
    f << p.label << '\t' << p.template_id << '\t' << p.tense << '\t' << p.text << '\n';
}

// Probability that a random plural-prompt score exceeds a random
// singular-prompt score, ties counted half. 1 = perfect, 0.5 = chance,
// 0 = inverted.
inline double agreement_auc(const std::vector<double>& plural_scores,
                            const std::vector<double>& singular_scores) {
  if (plural_scores.empty() || singular_scores.empty())
    throw std::invalid_argument("auc: both score sets must be non-empty");
  double wins = 0.0;
  for (double p : plural_scores)
    for (double s : singular_scores) {
      if (p > s)
        wins += 1.0;
      else if (p == s)
        wins += 0.5;
    }
  return wins / (static_cast<double>(plural_scores.size()) * singular_scores.size());
}

// ---------------------------------------------------------------------------
// Synthetic agreement surrogate (desk-scale stand-in for a pretrained LLM)
// ---------------------------------------------------------------------------

// Tiny deterministic grammar with noun-number -> verb-number agreement across
// an attractor phrase of opposite number:
//   TENSE the N1 PREP the N2 VERB
// e.g. "now the key near the cups is", "then the dogs by the cup were".
struct SurrogateGrammar {
  std::vector<std::string> vocab = {"the", "key",  "cup", "dog", "keys", "cups", "dogs", "near",
                                    "by",  "now",  "then", "is",  "are",  "was",  "were"};
  std::vector<int> singular_nouns = {1, 2, 3};
  std::vector<int> plural_nouns = {4, 5, 6};
  std::vector<int> preps = {7, 8};
  std::vector<int> tense_markers = {9, 10};  // now = present, then = past
  int verb_is = 11;
  int verb_are = 12;
  int verb_was = 13;
  int verb_were = 14;

  int vocab_size() const { return static_cast<int>(vocab.size()); }
  static constexpr int kSentenceLen = 7;
  static constexpr int kDecisionPos = 5;  // logits here predict the verb

  std::vector<int> plural_verbs() const { return {verb_are, verb_were}; }
  std::vector<int> singular_verbs() const { return {verb_is, verb_was}; }

  bool is_verb(int tok) const {
    return tok == verb_is || tok == verb_are || tok == verb_was || tok == verb_were;
  }
  bool is_plural_verb(int tok) const { return tok == verb_are || tok == verb_were; }
};

struct SurrogateSentence {
  std::vector<int> tokens;  // full sentence, kSentenceLen long
  int label = 0;            // head-noun number: 0 singular, 1 plural
  int tense = 0;            // 0 present, 1 past
};

// Every sentence of the grammar (72 of them): 2 tenses x 6 head nouns x
// 2 prepositions x 3 opposite-number attractors.
inline std::vector<SurrogateSentence> surrogate_sentences(const SurrogateGrammar& g = {}) {
  std::vector<SurrogateSentence> out;
  for (int tense = 0; tense < 2; ++tense)
    for (int number = 0; number < 2; ++number) {
      const auto& heads = number == 0 ? g.singular_nouns : g.plural_nouns;
      const auto& attrs = number == 0 ? g.plural_nouns : g.singular_nouns;
      for (int head : heads)
        for (int prep : g.preps)
          for (int attr : attrs) {
            SurrogateSentence s;
            s.label = number;
            s.tense = tense;
            int verb = tense == 0 ? (number == 0 ? g.verb_is : g.verb_are)
                                  : (number == 0 ? g.verb_was : g.verb_were);
            s.tokens = {g.tense_markers[tense], 0, head, prep, 0, attr, verb};
            out.push_back(std::move(s));
          }
    }
  return out;
}

// Next-token LM dataset over the full grammar; accuracy is scored at the
// verb decision point only.
inline SeqDataset surrogate_dataset(const std::vector<SurrogateSentence>& sentences) {
  SeqDataset d;
  for (const auto& s : sentences) {
    d.tokens.push_back(s.tokens);
    std::vector<int> tgt(s.tokens.size(), 0);
    for (std::size_t p = 0; p + 1 < s.tokens.size(); ++p) tgt[p] = s.tokens[p + 1];
    d.targets.push_back(std::move(tgt));
  }
  d.loss_weights.assign(SurrogateGrammar::kSentenceLen, 1.0);
  d.loss_weights.back() = 0.0;
  d.acc_weights.assign(SurrogateGrammar::kSentenceLen, 0.0);
  d.acc_weights[SurrogateGrammar::kDecisionPos] = 1.0;
  return d;
}

// Prompts are sentences truncated before the verb.
inline std::vector<std::vector<int>> surrogate_prompts(const std::vector<SurrogateSentence>& s) {
  std::vector<std::vector<int>> out;
  out.reserve(s.size());
  for (const auto& sent : s)
    out.emplace_back(sent.tokens.begin(), sent.tokens.end() - 1);
  return out;
}

// Linear verb-number readout on logits: (logit_are + logit_were) -
// (logit_is + logit_was); the margin used for extraction Jacobians and AUC.
inline Matrix surrogate_margin_readout(const SurrogateGrammar& g) {
  Matrix r(1, g.vocab_size());
  r(0, g.verb_are) = 1.0;
  r(0, g.verb_were) = 1.0;
  r(0, g.verb_is) = -1.0;
  r(0, g.verb_was) = -1.0;
  return r;
}

struct SurrogateTaskSpec {
  SurrogateGrammar grammar;
  TransformerConfig model{.n_layers = 2, .d_model = 32, .d_ff = 128, .n_heads = 4,
                          .vocab_size = 15, .max_seq_len = 8};
  long epochs = 400;
  int batch_size = 24;
  double lr = 1e-3;
  double weight_decay = 0.1;
};

inline SurrogateTaskSpec surrogate_agreement_task() { return SurrogateTaskSpec{}; }

}  // namespace acelab
