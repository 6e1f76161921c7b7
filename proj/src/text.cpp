#include "cal3/text.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>

namespace cal3 {

namespace {
constexpr const char* kRegionNames[kNumRegions] = {"frontal", "parietal", "temporal", "occipital",
                                                   "cerebellar"};
}

const char* region_name(Region r) { return kRegionNames[static_cast<int>(r)]; }

Region region_from_name(const std::string& name) {
    for (int i = 0; i < kNumRegions; ++i)
        if (name == kRegionNames[i]) return static_cast<Region>(i);
    throw DomainError("unknown region name: '" + name + "'");
}

std::vector<Region> all_regions() {
    std::vector<Region> out;
    for (int i = 0; i < kNumRegions; ++i) out.push_back(static_cast<Region>(i));
    return out;
}

const char* gender_name(Gender g) { return g == Gender::male ? "male" : "female"; }

Gender gender_from_name(const std::string& name) {
    if (name == "male") return Gender::male;
    if (name == "female") return Gender::female;
    throw DomainError("unknown gender name: '" + name + "'");
}

std::string record_to_sentence(const TabularRecord& record) {
    std::ostringstream os;
    os << "The age of the subject is " << record.age_at_diagnosis << ". The gender of the patient is "
       << gender_name(record.gender) << ".";
    for (std::size_t i = 0; i < record.lesions.size(); ++i) {
        if (i == 0)
            os << " A tumor has been identified in the " << region_name(record.lesions[i])
               << " area of the brain.";
        else
            os << " Additionally, a lesion is present in the " << region_name(record.lesions[i])
               << " area.";
    }
    return os.str();
}

std::string region_prompt(Region region) {
    return std::string("There is a lesion in the ") + region_name(region) + " section";
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i) + 2;
}

int Vocabulary::lookup(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnkId : it->second;
}

std::string Vocabulary::to_text() const {
    std::ostringstream os;
    for (const auto& w : words_) os << w << "\n";
    return os.str();
}

Vocabulary Vocabulary::from_text(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty()) words.push_back(line);
    }
    return Vocabulary(std::move(words));
}

Vocabulary build_vocab(const std::vector<std::string>& corpus) {
    if (corpus.empty()) throw ContractError("build_vocab: empty corpus");
    // std::map keeps ties resolvable lexicographically without a second key
    std::map<std::string, long long> counts;
    for (const auto& text : corpus)
        for (const auto& w : split_words(text)) ++counts[w];

    std::vector<std::pair<std::string, long long>> entries(counts.begin(), counts.end());
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> words;
    words.reserve(entries.size());
    for (auto& e : entries) words.push_back(std::move(e.first));
    return Vocabulary(std::move(words));
}

std::vector<std::string> template_closure_corpus() {
    std::vector<std::string> corpus;
    for (int age = 0; age <= 120; ++age) {
        for (Gender g : {Gender::male, Gender::female}) {
            // two lesions exercise both the first and the follow-up clause
            corpus.push_back(record_to_sentence({age, g, {Region::frontal, Region::occipital}}));
        }
    }
    for (Region first : all_regions())
        for (Region second : all_regions())
            if (first != second)
                corpus.push_back(record_to_sentence({50, Gender::female, {first, second}}));
    corpus.push_back(record_to_sentence({50, Gender::male, {}}));
    return corpus;
}

std::vector<std::string> split_words(const std::string& text) {
    std::string cleaned;
    cleaned.reserve(text.size());
    for (char c : text) {
        if (c == '.' || c == ',') continue;
        cleaned.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    std::vector<std::string> words;
    std::istringstream is(cleaned);
    std::string w;
    while (is >> w) words.push_back(w);
    return words;
}

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, int max_tokens) {
    auto words = split_words(text);
    TokenSequence seq;
    seq.ids.assign(static_cast<std::size_t>(max_tokens), kPadId);
    seq.truncated = static_cast<int>(words.size()) > max_tokens;
    seq.length = std::min<int>(static_cast<int>(words.size()), max_tokens);
    for (int i = 0; i < seq.length; ++i) seq.ids[static_cast<std::size_t>(i)] = vocab.lookup(words[static_cast<std::size_t>(i)]);
    return seq;
}

}  // namespace cal3
