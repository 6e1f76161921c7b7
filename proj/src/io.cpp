#include "cal3/io.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cal3/errors.hpp"

static_assert(std::endian::native == std::endian::little, "volume payload assumes a little-endian host");

namespace cal3 {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string case_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "case_%04d", index);
    return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("write failure on '" + path + "'");
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void save_dataset(const std::string& dir, const Dataset& dataset) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset directory '" + dir + "': " + ec.message());

    ordered_json split;
    std::vector<char> is_test(dataset.cases.size(), 0);
    for (int i : dataset.test_indices) is_test[static_cast<std::size_t>(i)] = 1;

    for (std::size_t i = 0; i < dataset.cases.size(); ++i) {
        const auto& c = dataset.cases[i];
        std::string id = case_id(static_cast<int>(i));
        fs::path case_dir = fs::path(dir) / id;
        fs::create_directories(case_dir, ec);
        if (ec) throw IoError("cannot create '" + case_dir.string() + "': " + ec.message());

        {
            std::ofstream vol(case_dir / "volume.f32", std::ios::binary | std::ios::trunc);
            if (!vol) throw IoError("cannot write volume for " + id);
            vol.write(reinterpret_cast<const char*>(c.volume.voxels.data()),
                      static_cast<std::streamsize>(c.volume.voxels.size() * sizeof(float)));
        }
        {
            std::ostringstream shape;
            shape << c.volume.size << " " << c.volume.size << " " << c.volume.size << "\n";
            write_text_file((case_dir / "shape.txt").string(), shape.str());
        }
        {
            ordered_json rec;
            rec["age_at_diagnosis"] = c.record.age_at_diagnosis;
            rec["gender"] = gender_name(c.record.gender);
            auto lesions = ordered_json::array();
            for (Region r : c.record.lesions) lesions.push_back(region_name(r));
            rec["lesions"] = lesions;
            write_text_file((case_dir / "record.json").string(), rec.dump(2) + "\n");
        }
        split[id] = is_test[i] ? "test" : "train";
    }
    write_text_file((fs::path(dir) / "split.json").string(), split.dump(2) + "\n");
}

Dataset load_dataset(const std::string& dir) {
    fs::path root(dir);
    if (!fs::exists(root / "split.json")) throw IoError("dataset: missing '" + (root / "split.json").string() + "'");

    ordered_json split;
    try {
        split = ordered_json::parse(read_text_file((root / "split.json").string()));
    } catch (const std::exception& e) {
        throw IoError(std::string("dataset: split.json parse failure: ") + e.what());
    }

    Dataset ds;
    for (int i = 0;; ++i) {
        std::string id = case_id(i);
        fs::path case_dir = root / id;
        if (!fs::exists(case_dir)) break;

        Case c;
        {
            std::istringstream shape(read_text_file((case_dir / "shape.txt").string()));
            int sx = 0, sy = 0, sz = 0;
            shape >> sz >> sy >> sx;
            if (sz <= 0 || sz != sy || sz != sx)
                throw IoError("dataset: bad shape.txt for " + id + ", volumes must be cubic");
            c.volume.size = sz;
        }
        {
            std::ifstream vol(case_dir / "volume.f32", std::ios::binary);
            if (!vol) throw IoError("dataset: missing volume.f32 for " + id);
            std::size_t n = static_cast<std::size_t>(c.volume.size) * c.volume.size * c.volume.size;
            c.volume.voxels.resize(n);
            vol.read(reinterpret_cast<char*>(c.volume.voxels.data()),
                     static_cast<std::streamsize>(n * sizeof(float)));
            if (static_cast<std::size_t>(vol.gcount()) != n * sizeof(float))
                throw IoError("dataset: volume.f32 for " + id + " has the wrong size");
        }
        {
            ordered_json rec;
            try {
                rec = ordered_json::parse(read_text_file((case_dir / "record.json").string()));
            } catch (const std::exception& e) {
                throw IoError("dataset: record.json parse failure for " + id + ": " + e.what());
            }
            c.record.age_at_diagnosis = rec.at("age_at_diagnosis").get<int>();
            if (c.record.age_at_diagnosis < 0 || c.record.age_at_diagnosis > 120)
                throw IoError("dataset: age out of range for " + id);
            c.record.gender = gender_from_name(rec.at("gender").get<std::string>());
            for (const auto& name : rec.at("lesions")) {
                Region r = region_from_name(name.get<std::string>());
                if (std::find(c.record.lesions.begin(), c.record.lesions.end(), r) !=
                    c.record.lesions.end())
                    throw IoError("dataset: duplicate lesion region for " + id);
                c.record.lesions.push_back(r);
            }
        }

        int index = static_cast<int>(ds.cases.size());
        ds.cases.push_back(std::move(c));
        if (!split.contains(id)) throw IoError("dataset: case " + id + " missing from split.json");
        std::string assignment = split.at(id).get<std::string>();
        if (assignment == "train")
            ds.train_indices.push_back(index);
        else if (assignment == "test")
            ds.test_indices.push_back(index);
        else
            throw IoError("dataset: bad split assignment '" + assignment + "' for " + id);
    }
    if (ds.cases.empty()) throw IoError("dataset: no cases found under '" + dir + "'");
    return ds;
}

}  // namespace cal3
