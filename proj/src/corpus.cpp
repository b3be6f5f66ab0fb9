#include "mgec/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mgec/rng.hpp"

namespace mgec {

namespace {

using Word = std::vector<std::string>;

Word split_chars(const std::string& token) {
  Word w;
  for (char c : token) w.emplace_back(1, c);
  return w;
}

void merge_word(Word& w, const std::string& l, const std::string& r) {
  Word out;
  size_t i = 0;
  while (i < w.size()) {
    if (i + 1 < w.size() && w[i] == l && w[i + 1] == r) {
      out.push_back(l + r);
      i += 2;
    } else {
      out.push_back(w[i]);
      i += 1;
    }
  }
  w = out;
}

std::vector<std::string> whitespace_tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\t') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int MergeTable::lookup(const std::string& symbol) const {
  auto it = symbol_to_id.find(symbol);
  return it == symbol_to_id.end() ? kUnkId : it->second;
}

MergeTable learn_bpe(const std::vector<std::vector<std::string>>& corpus, int num_merges) {
  if (corpus.empty()) throw std::invalid_argument("learn_bpe: corpus is empty");
  if (num_merges < 0) throw std::invalid_argument("learn_bpe: negative merge count");

  std::map<std::string, long> freq;
  for (const auto& sentence : corpus)
    for (const auto& token : sentence) {
      if (token.empty()) throw std::invalid_argument("learn_bpe: empty token in corpus");
      ++freq[token];
    }

  std::vector<std::pair<Word, long>> words;
  words.reserve(freq.size());
  for (const auto& [token, f] : freq) words.push_back({split_chars(token), f});

  MergeTable table;
  for (int m = 0; m < num_merges; ++m) {
    std::map<std::pair<std::string, std::string>, long> pair_count;
    for (const auto& [w, f] : words)
      for (size_t i = 0; i + 1 < w.size(); ++i) pair_count[{w[i], w[i + 1]}] += f;
    if (pair_count.empty()) break;
    // map order is the tie-break order, so only a strictly higher count wins
    std::pair<std::string, std::string> best;
    long best_count = -1;
    for (const auto& [p, c] : pair_count)
      if (c > best_count) {
        best = p;
        best_count = c;
      }
    table.merges.push_back(best);
    for (auto& [w, f] : words) merge_word(w, best.first, best.second);
  }

  std::set<std::string> symbols;
  for (const auto& [w, f] : words)
    for (size_t i = 0; i < w.size(); ++i)
      symbols.insert(i + 1 < w.size() ? w[i] + "@@" : w[i]);
  // character fallback keeps unknowns limited to genuinely unseen characters
  for (const auto& [token, f] : freq)
    for (char c : token) {
      symbols.insert(std::string(1, c));
      symbols.insert(std::string(1, c) + "@@");
    }

  table.id_to_symbol = {"<unk>", "<pad>", "<bos>", "<eos>"};
  for (const auto& s : symbols) table.id_to_symbol.push_back(s);
  for (size_t i = 0; i < table.id_to_symbol.size(); ++i)
    table.symbol_to_id.emplace(table.id_to_symbol[i], (int)i);
  return table;
}

std::vector<std::string> apply_bpe(const std::string& token, const MergeTable& table) {
  if (token.empty()) throw std::invalid_argument("apply_bpe: empty token");
  Word w = split_chars(token);
  for (const auto& [l, r] : table.merges) merge_word(w, l, r);
  for (size_t i = 0; i + 1 < w.size(); ++i) w[i] += "@@";
  return w;
}

void save_merge_table(const MergeTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_merge_table: cannot open " + path);
  out << "mgec-bpe v1\n";
  for (const auto& [l, r] : table.merges) out << l << ' ' << r << '\n';
  out << "#vocab\n";
  for (size_t i = 4; i < table.id_to_symbol.size(); ++i) out << table.id_to_symbol[i] << '\n';
  if (!out) throw std::runtime_error("save_merge_table: write failed for " + path);
}

MergeTable load_merge_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_merge_table: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_merge_table: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "mgec-bpe v1")
    throw std::runtime_error("load_merge_table: unrecognized header in " + path);

  MergeTable table;
  table.id_to_symbol = {"<unk>", "<pad>", "<bos>", "<eos>"};
  bool in_vocab = false;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line == "#vocab") {
      in_vocab = true;
      continue;
    }
    if (in_vocab) {
      table.id_to_symbol.push_back(line);
    } else {
      size_t sp = line.find(' ');
      if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size())
        throw std::runtime_error("load_merge_table: malformed merge at line " +
                                 std::to_string(lineno) + " in " + path);
      table.merges.push_back({line.substr(0, sp), line.substr(sp + 1)});
    }
  }
  for (size_t i = 0; i < table.id_to_symbol.size(); ++i)
    table.symbol_to_id.emplace(table.id_to_symbol[i], (int)i);
  return table;
}

Codec::Codec(MergeTable table) : table_(std::move(table)) {}

std::vector<int> Codec::encode(const std::vector<std::string>& word_tokens) const {
  std::vector<int> out;
  for (const auto& word : word_tokens) {
    auto it = memo_.find(word);
    if (it == memo_.end()) {
      std::vector<int> ids;
      for (const auto& piece : apply_bpe(word, table_)) ids.push_back(table_.lookup(piece));
      it = memo_.emplace(word, std::move(ids)).first;
    }
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
  return out;
}

std::vector<std::string> Codec::decode(const std::vector<int>& ids) const {
  std::vector<std::string> words;
  std::string cur;
  for (int id : ids) {
    if (id == MergeTable::kPadId || id == MergeTable::kBosId || id == MergeTable::kEosId) continue;
    if (id < 0 || id >= table_.vocab_size())
      throw std::out_of_range("Codec::decode: id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(table_.vocab_size()));
    const std::string& sym = table_.id_to_symbol[(size_t)id];
    if (sym.size() > 2 && sym.ends_with("@@")) {
      cur += sym.substr(0, sym.size() - 2);
    } else {
      cur += sym;
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);  // unterminated continuation keeps its text
  return words;
}

Splits make_splits(const std::vector<DomainDataset>& datasets, const SplitSpec& spec,
                   std::uint64_t rng_seed) {
  if (spec.source_count <= 0 || spec.valid_train <= 0 || spec.valid_dev <= 0 ||
      spec.valid_test <= 0 || spec.test_train <= 0 || spec.test_dev_parts <= 0 ||
      spec.test_test_parts <= 0)
    throw std::invalid_argument("make_splits: all counts and ratio parts must be positive");

  std::map<std::string, const DomainDataset*> by_name;
  for (const auto& ds : datasets)
    if (!by_name.emplace(ds.domain, &ds).second)
      throw std::invalid_argument("make_splits: duplicate domain " + ds.domain);

  auto find = [&](const std::string& name) -> const DomainDataset& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::invalid_argument("make_splits: no dataset for domain " + name);
    return *it->second;
  };

  auto permuted = [&](const DomainDataset& ds, int needed) {
    if ((int)ds.pairs.size() < needed)
      throw std::invalid_argument("make_splits: domain " + ds.domain + " has " +
                                  std::to_string(ds.pairs.size()) + " pairs, " +
                                  std::to_string(needed - (long)ds.pairs.size()) + " short of " +
                                  std::to_string(needed));
    std::vector<int> order((size_t)ds.pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = (int)i;
    Rng rng(Rng::stream(rng_seed, "split:" + ds.domain));
    rng.shuffle(order);
    return order;
  };
  auto take = [](const DomainDataset& ds, const std::vector<int>& order, size_t from, size_t count) {
    std::vector<SentencePair> out;
    out.reserve(count);
    for (size_t i = from; i < from + count; ++i) out.push_back(ds.pairs[(size_t)order[i]]);
    return out;
  };

  Splits splits;

  const DomainDataset& valid = find(spec.valid_domain);
  std::set<std::string> reserved = {spec.valid_domain};
  for (const auto& name : spec.test_domains) {
    find(name);
    if (!reserved.insert(name).second)
      throw std::invalid_argument("make_splits: domain " + name + " assigned twice");
  }

  for (const auto& ds : datasets) {
    if (reserved.count(ds.domain)) continue;
    auto order = permuted(ds, spec.source_count);
    splits.source_tasks.push_back({ds.domain, take(ds, order, 0, (size_t)spec.source_count)});
  }

  {
    int needed = spec.valid_train + spec.valid_dev + spec.valid_test;
    auto order = permuted(valid, needed);
    splits.valid_task.domain = valid.domain;
    splits.valid_task.train = take(valid, order, 0, (size_t)spec.valid_train);
    splits.valid_task.dev = take(valid, order, (size_t)spec.valid_train, (size_t)spec.valid_dev);
    splits.valid_task.test =
        take(valid, order, (size_t)(spec.valid_train + spec.valid_dev), (size_t)spec.valid_test);
  }

  for (const auto& name : spec.test_domains) {
    const DomainDataset& ds = find(name);
    int parts = spec.test_dev_parts + spec.test_test_parts;
    auto order = permuted(ds, spec.test_train + parts);
    int rest = (int)ds.pairs.size() - spec.test_train;
    int dev = rest * spec.test_dev_parts / parts;
    TaskSplit t;
    t.domain = name;
    t.train = take(ds, order, 0, (size_t)spec.test_train);
    t.dev = take(ds, order, (size_t)spec.test_train, (size_t)dev);
    t.test = take(ds, order, (size_t)(spec.test_train + dev), (size_t)(rest - dev));
    splits.test_tasks.push_back(std::move(t));
  }
  return splits;
}

namespace {

const std::vector<std::string> kNouns = {
    "bird",   "cat",    "doctor", "dog",    "driver",  "farmer", "friend",  "guest",
    "horse",  "neighbor", "painter", "singer", "student", "teacher", "visitor", "worker"};
const std::vector<std::string> kVerbs = {"answer", "borrow", "call",  "clean", "climb", "cook",
                                         "follow", "greet",  "help",  "paint", "pull",  "visit"};
const std::vector<std::string> kAdjs = {"brave", "busy",  "happy", "kind",
                                        "quiet", "small", "tall",  "young"};
const std::vector<std::string> kPreps = {"above", "behind", "beside", "near", "under"};
const std::vector<std::string> kFunctionWords = {"a",      "the",    "was",  "were", "above",
                                                 "behind", "beside", "near", "under"};

struct SentenceInfo {
  std::vector<std::string> target;
  int verb_index;  // token carrying subject agreement (verb form or was/were)
  int prep_index;  // -1 when there is no prepositional phrase
};

// every sentence has agreement morphology: present third-singular -s, or
// was/were plus the -ing participle
SentenceInfo gen_sentence(Rng& rng) {
  SentenceInfo s;
  s.prep_index = -1;
  auto noun_phrase = [&](bool allow_indefinite) {
    bool plural = rng.uniform() < 0.4;
    if (!plural && allow_indefinite && rng.uniform() < 0.5)
      s.target.push_back("a");
    else
      s.target.push_back("the");
    if (rng.uniform() < 0.4) s.target.push_back(kAdjs[rng.uniform_int(kAdjs.size())]);
    const std::string& n = kNouns[rng.uniform_int(kNouns.size())];
    s.target.push_back(plural ? n + "s" : n);
    return plural;
  };

  bool subject_plural = noun_phrase(true);
  const std::string& verb = kVerbs[rng.uniform_int(kVerbs.size())];
  if (rng.uniform() < 0.4) {
    s.verb_index = (int)s.target.size();
    s.target.push_back(subject_plural ? "were" : "was");
    s.target.push_back(verb + "ing");
  } else {
    s.verb_index = (int)s.target.size();
    s.target.push_back(subject_plural ? verb : verb + "s");
  }
  noun_phrase(true);
  if (rng.uniform() < 0.45) {
    s.prep_index = (int)s.target.size();
    s.target.push_back(kPreps[rng.uniform_int(kPreps.size())]);
    s.target.push_back("the");
    const std::string& n = kNouns[rng.uniform_int(kNouns.size())];
    s.target.push_back(rng.uniform() < 0.3 ? n + "s" : n);
  }
  s.target.push_back(".");
  return s;
}

struct Tok {
  std::string word;
  int origin;  // target index this token descends from, -1 for inserted words
};

// anchors = longest strictly increasing origin chain over still-matching
// tokens; each gap between anchors becomes one replacement edit
std::vector<EditSpan> edits_from_origins(const std::vector<Tok>& src,
                                         const std::vector<std::string>& tgt) {
  std::vector<int> idx, org;
  for (size_t i = 0; i < src.size(); ++i)
    if (src[i].origin >= 0 && src[i].origin < (int)tgt.size() &&
        src[i].word == tgt[(size_t)src[i].origin]) {
      idx.push_back((int)i);
      org.push_back(src[i].origin);
    }
  int k = (int)idx.size();
  std::vector<int> len((size_t)k, 1);
  int best = 0;
  for (int i = k - 1; i >= 0; --i) {
    for (int j = i + 1; j < k; ++j)
      if (org[(size_t)j] > org[(size_t)i]) len[(size_t)i] = std::max(len[(size_t)i], 1 + len[(size_t)j]);
    best = std::max(best, len[(size_t)i]);
  }

  std::vector<std::pair<int, int>> anchors;
  int need = best, last_org = -1;
  for (int i = 0; i < k && need > 0; ++i)
    if (len[(size_t)i] == need && org[(size_t)i] > last_org) {
      anchors.push_back({idx[(size_t)i], org[(size_t)i]});
      last_org = org[(size_t)i];
      --need;
    }
  anchors.push_back({(int)src.size(), (int)tgt.size()});

  std::vector<EditSpan> edits;
  int pi = -1, po = -1;
  for (const auto& [i, o] : anchors) {
    if (i > pi + 1 || o > po + 1) {
      EditSpan e;
      e.start = pi + 1;
      e.end = i;
      for (int t = po + 1; t < o; ++t) e.replacement.push_back(tgt[(size_t)t]);
      edits.push_back(std::move(e));
    }
    pi = i;
    po = o;
  }
  return edits;
}

}  // namespace

// The generic "mix" pool exhibits only article and agreement errors, while the
// adaptation domains lean on word-order swaps and spurious insertions. A model
// trained on the pool alone has never seen the error types that dominate the
// targets, which is exactly the gap few-shot adaptation is meant to close.
const std::vector<DomainProfile>& builtin_profiles() {
  static const std::vector<DomainProfile> kProfiles = {
      //            article agree  prep  swap  insert
      {"ko",        0.45,   0.20,  0.05, 0.15, 0.15},
      {"zhtw",      0.30,   0.15,  0.05, 0.35, 0.15},
      {"ja",        0.25,   0.30,  0.05, 0.20, 0.25},
      {"ma",        0.15,   0.25,  0.10, 0.30, 0.20},
      {"bu",        0.20,   0.15,  0.05, 0.25, 0.35},
      {"th",        0.10,   0.20,  0.05, 0.40, 0.25},
      {"ensg",      0.35,   0.35,  0.05, 0.15, 0.10},
      {"en",        0.15,   0.40,  0.05, 0.25, 0.15},
      {"vi",        0.25,   0.20,  0.10, 0.30, 0.25},
      {"in",        0.10,   0.15,  0.05, 0.35, 0.30},
      {"de",        0.15,   0.10,  0.05, 0.40, 0.25},
      {"ru",        0.10,   0.20,  0.05, 0.30, 0.35},
      {"fr",        0.20,   0.10,  0.05, 0.35, 0.25},
      {"mo",        0.10,   0.15,  0.10, 0.45, 0.30},
      {"mix",       0.40,   0.40,  0.00, 0.00, 0.00},
  };
  return kProfiles;
}

const DomainProfile& profile_by_name(const std::string& domain) {
  for (const auto& p : builtin_profiles())
    if (p.domain == domain) return p;
  throw std::invalid_argument("profile_by_name: unknown domain " + domain);
}

DomainDataset synth_domain(const DomainProfile& profile, int n, std::uint64_t rng_seed) {
  if (n <= 0) throw std::invalid_argument("synth_domain: n must be positive");
  for (double p : {profile.article_drop, profile.agreement_flip, profile.preposition_swap,
                   profile.adjacent_swap, profile.function_insert})
    if (!(p >= 0.0 && p <= 1.0))
      throw std::invalid_argument("synth_domain: rule probability outside [0,1] for domain " +
                                  profile.domain);

  Rng rng(Rng::stream(rng_seed, "synth:" + profile.domain));
  DomainDataset ds;
  ds.domain = profile.domain;
  ds.pairs.reserve((size_t)n);

  for (int i = 0; i < n; ++i) {
    SentenceInfo s = gen_sentence(rng);
    std::vector<Tok> src;
    src.reserve(s.target.size());
    for (size_t j = 0; j < s.target.size(); ++j) src.push_back({s.target[j], (int)j});

    if (rng.uniform() < profile.article_drop) {
      std::vector<size_t> articles;
      for (size_t j = 0; j < src.size(); ++j)
        if (src[j].word == "a" || src[j].word == "the") articles.push_back(j);
      if (!articles.empty())
        src.erase(src.begin() + (long)articles[rng.uniform_int(articles.size())]);
    }
    if (rng.uniform() < profile.agreement_flip) {
      for (auto& t : src)
        if (t.origin == s.verb_index) {
          if (t.word == "was")
            t.word = "were";
          else if (t.word == "were")
            t.word = "was";
          else if (t.word.back() == 's')
            t.word.pop_back();
          else
            t.word += "s";
          break;
        }
    }
    if (s.prep_index >= 0 && rng.uniform() < profile.preposition_swap) {
      for (auto& t : src)
        if (t.origin == s.prep_index) {
          std::vector<std::string> others;
          for (const auto& p : kPreps)
            if (p != t.word) others.push_back(p);
          t.word = others[rng.uniform_int(others.size())];
          break;
        }
    }
    if (src.size() >= 2 && rng.uniform() < profile.adjacent_swap) {
      size_t j = rng.uniform_int(src.size() - 1);
      std::swap(src[j], src[j + 1]);
    }
    if (rng.uniform() < profile.function_insert) {
      size_t pos = rng.uniform_int(src.size() + 1);
      src.insert(src.begin() + (long)pos,
                 {kFunctionWords[rng.uniform_int(kFunctionWords.size())], -1});
    }

    SentencePair pair;
    pair.domain = profile.domain;
    pair.target_tokens = s.target;
    for (const auto& t : src) pair.source_tokens.push_back(t.word);
    if (pair.source_tokens == pair.target_tokens)
      pair.gold_edits = std::vector<EditSpan>{};
    else
      pair.gold_edits = edits_from_origins(src, s.target);
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

DomainDataset load_parallel(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_parallel: cannot open " + path);
  DomainDataset ds;
  ds.domain = std::filesystem::path(path).stem().string();

  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.rfind("#domain:", 0) == 0) {
      ds.domain = line.substr(8);
      continue;
    }
    size_t tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw std::runtime_error("load_parallel: malformed line " + std::to_string(lineno) + " in " +
                               path);
    SentencePair pair;
    pair.domain = ds.domain;
    pair.source_tokens = whitespace_tokenize(line.substr(0, tab));
    pair.target_tokens = whitespace_tokenize(line.substr(tab + 1));
    if (pair.source_tokens.empty() || pair.target_tokens.empty())
      throw std::runtime_error("load_parallel: empty side at line " + std::to_string(lineno) +
                               " in " + path);
    ds.pairs.push_back(std::move(pair));
  }
  if (ds.pairs.empty()) throw std::runtime_error("load_parallel: no pairs in " + path);
  return ds;
}

void save_parallel(const DomainDataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_parallel: cannot open " + path);
  out << "#domain:" << dataset.domain << '\n';
  for (const auto& pair : dataset.pairs) {
    for (size_t i = 0; i < pair.source_tokens.size(); ++i)
      out << (i ? " " : "") << pair.source_tokens[i];
    out << '\t';
    for (size_t i = 0; i < pair.target_tokens.size(); ++i)
      out << (i ? " " : "") << pair.target_tokens[i];
    out << '\n';
  }
  if (!out) throw std::runtime_error("save_parallel: write failed for " + path);
}

}  // namespace mgec
