#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <string>

#include "cal3/text.hpp"

using namespace cal3;

TEST_CASE("record_to_sentence reproduces the reference example") {
    TabularRecord r{57, Gender::female, {Region::frontal, Region::occipital}};
    CHECK(record_to_sentence(r) ==
          "The age of the subject is 57. The gender of the patient is female. "
          "A tumor has been identified in the frontal area of the brain. "
          "Additionally, a lesion is present in the occipital area.");
}

TEST_CASE("record_to_sentence single lesion and empty lesion list") {
    CHECK(record_to_sentence({40, Gender::male, {Region::cerebellar}}) ==
          "The age of the subject is 40. The gender of the patient is male. "
          "A tumor has been identified in the cerebellar area of the brain.");
    CHECK(record_to_sentence({23, Gender::female, {}}) ==
          "The age of the subject is 23. The gender of the patient is female.");
}

TEST_CASE("region prompts") {
    CHECK(region_prompt(Region::frontal) == "There is a lesion in the frontal section");
    CHECK(region_prompt(Region::cerebellar) == "There is a lesion in the cerebellar section");
    std::set<std::string> prompts;
    for (Region r : all_regions()) prompts.insert(region_prompt(r));
    CHECK(prompts.size() == 5);
}

TEST_CASE("build_vocab orders by frequency then lexicographically") {
    auto v = build_vocab({"a a b"});
    CHECK(v.lookup("a") == 2);
    CHECK(v.lookup("b") == 3);
    CHECK(v.lookup("zzz") == kUnkId);

    auto tie = build_vocab({"dog cat dog cat bee"});
    CHECK(tie.lookup("cat") == 2);  // tie with dog broken lexicographically
    CHECK(tie.lookup("dog") == 3);
    CHECK(tie.lookup("bee") == 4);
}

TEST_CASE("vocab rebuild and text round trip are identical") {
    auto corpus = template_closure_corpus();
    auto v1 = build_vocab(corpus);
    auto v2 = build_vocab(corpus);
    CHECK(v1.words() == v2.words());
    auto v3 = Vocabulary::from_text(v1.to_text());
    CHECK(v3.words() == v1.words());
}

TEST_CASE("template closure vocabulary is small and closed") {
    auto vocab = build_vocab(template_closure_corpus());
    CHECK(vocab.word_count() <= 160);

    // every template output over the full attribute space maps to known ids
    for (int age = 0; age <= 120; ++age) {
        for (Gender g : {Gender::male, Gender::female}) {
            for (int mask = 0; mask < 32; ++mask) {
                TabularRecord r{age, g, {}};
                for (int i = 0; i < kNumRegions; ++i)
                    if (mask & (1 << i)) r.lesions.push_back(static_cast<Region>(i));
                auto seq = tokenize(record_to_sentence(r), vocab, 64);
                for (int i = 0; i < seq.length; ++i) {
                    REQUIRE(seq.ids[static_cast<std::size_t>(i)] != kUnkId);
                    REQUIRE(seq.ids[static_cast<std::size_t>(i)] != kPadId);
                }
            }
        }
    }
}

TEST_CASE("record_to_sentence is injective over the full attribute space") {
    std::set<std::string> sentences;
    long long count = 0;
    for (int age = 0; age <= 120; ++age)
        for (Gender g : {Gender::male, Gender::female})
            for (int mask = 0; mask < 32; ++mask) {
                TabularRecord r{age, g, {}};
                for (int i = 0; i < kNumRegions; ++i)
                    if (mask & (1 << i)) r.lesions.push_back(static_cast<Region>(i));
                sentences.insert(record_to_sentence(r));
                ++count;
            }
    CHECK(static_cast<long long>(sentences.size()) == count);
}

TEST_CASE("each age is a single token") {
    auto vocab = build_vocab(template_closure_corpus());
    auto seq = tokenize(record_to_sentence({107, Gender::male, {}}), vocab, 64);
    // "the age of the subject is 107 ..." -> index 6 is the age token
    CHECK(seq.ids[6] == vocab.lookup("107"));
    CHECK(vocab.lookup("107") != kUnkId);
}

TEST_CASE("tokenize basics") {
    auto vocab = build_vocab({"alpha beta gamma"});

    auto empty = tokenize("", vocab, 8);
    CHECK(empty.length == 0);
    CHECK_FALSE(empty.truncated);
    for (int id : empty.ids) CHECK(id == kPadId);

    auto a = tokenize("Alpha, beta. GAMMA delta", vocab, 8);
    auto b = tokenize("Alpha, beta. GAMMA delta", vocab, 8);
    CHECK(a.ids == b.ids);
    CHECK(a.length == 4);
    CHECK(a.ids[0] == vocab.lookup("alpha"));
    CHECK(a.ids[3] == kUnkId);  // delta unseen

    auto t = tokenize("alpha beta gamma alpha beta", vocab, 3);
    CHECK(t.truncated);
    CHECK(t.length == 3);
}

TEST_CASE("region name round trip and errors") {
    for (Region r : all_regions()) CHECK(region_from_name(region_name(r)) == r);
    CHECK_THROWS_AS(region_from_name("spinal"), DomainError);
    CHECK_THROWS_AS(gender_from_name("unknown"), DomainError);
}
