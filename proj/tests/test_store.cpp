#include <avd/store.hpp>

#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <thread>

using namespace avd;
using avd::testing::TempDir;

namespace {

FeaturePyramid random_pyramid(std::mt19937_64& rng, int w, int h, PyramidParams p = {})
{
    return build_pyramid(gaussian_blur(oracle::random_image(rng, w, h), 1.0, 1.0), p);
}

CacheKey key(std::uint64_t n) { return {n, 0xabcdef}; }

std::uintmax_t bytes_on_disk(const std::filesystem::path& dir)
{
    std::uintmax_t total = 0;
    for (const auto& de : std::filesystem::directory_iterator(dir))
        total += de.file_size();
    return total;
}

IndexRecord record(std::string media, int frame, std::vector<IndexDetection> dets, std::string model = "m1")
{
    return {std::move(media), frame, frame / 25.0, std::move(dets), std::move(model)};
}

} // namespace

// --- hashing and keys ------------------------------------------------------

TEST(CacheKey, Fnv1aReferenceVectors)
{
    EXPECT_EQ(fnv1a64(std::string_view("")), 0xcbf29ce484222325ull);
    EXPECT_EQ(fnv1a64(std::string_view("a")), 0xaf63dc4c8601ec8cull);
    EXPECT_EQ(fnv1a64(std::string_view("foobar")), 0x85944171f73967e8ull);
    EXPECT_EQ(hex64(0xabcull), "0000000000000abc");
}

TEST(CacheKey, ParamsHashCoversEveryInput)
{
    const PyramidParams p{};
    const ViewSpec v{2.0, 0.5};
    const auto base = pyramid_params_hash(p, v);
    EXPECT_EQ(base, pyramid_params_hash(p, v, 0.8));
    EXPECT_NE(base, pyramid_params_hash({4, 10, 5}, v));
    EXPECT_NE(base, pyramid_params_hash({8, 5, 5}, v));
    EXPECT_NE(base, pyramid_params_hash({8, 10, 6}, v));
    EXPECT_NE(base, pyramid_params_hash(p, {2.0, 0.6}));
    EXPECT_NE(base, pyramid_params_hash(p, {std::sqrt(2.0), 0.5}));
    EXPECT_NE(base, pyramid_params_hash(p, v, 0.5));

    const std::vector<std::uint8_t> a{1, 2, 3}, b{1, 2, 4};
    EXPECT_NE(make_cache_key(a, p, v), make_cache_key(b, p, v));
    EXPECT_EQ(make_cache_key(a, p, v).params_hash, base);
}

TEST(CacheKey, FileStemRoundTrip)
{
    const CacheKey k{0x0123456789abcdefull, 0xfedcba9876543210ull};
    EXPECT_EQ(k.file_stem(), "0123456789abcdef-fedcba9876543210");
    EXPECT_EQ(detail::parse_cache_stem(k.file_stem()), k);
    EXPECT_FALSE(detail::parse_cache_stem("0123456789abcdef_fedcba9876543210"));
    EXPECT_FALSE(detail::parse_cache_stem("0123456789abcdef-fedcba987654321"));
    EXPECT_FALSE(detail::parse_cache_stem("0123456789abcdeg-fedcba9876543210"));
}

// --- AVPF ------------------------------------------------------------------

TEST(Avpf, RoundTripIsBitExact)
{
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        const PyramidParams p{trial % 2 ? 4 : 8, 3 + trial, 5};
        const auto pyr = random_pyramid(rng, 48 + 7 * trial, 40 + 5 * trial, p);
        const auto bytes = serialize_pyramid(pyr);
        EXPECT_EQ(bytes.size(), avpf_size(pyr));
        const auto back = parse_pyramid(bytes);
        EXPECT_EQ(back, pyr);
        EXPECT_EQ(serialize_pyramid(back), bytes);
    }
}

TEST(Avpf, SizeAndHeaderLayout)
{
    std::mt19937_64 rng(2);
    const auto pyr = random_pyramid(rng, 64, 48, {8, 2, 5});
    const auto bytes = serialize_pyramid(pyr);
    std::size_t expected = 12;
    for (const auto& lv : pyr.levels)
        expected += 8 + 4u * lv.cells_w * lv.cells_h * 31;
    EXPECT_EQ(bytes.size(), expected);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "AVPF");
    EXPECT_EQ(bytes[4] | bytes[5] << 8, 1);
    EXPECT_EQ(bytes[6] | bytes[7] << 8, static_cast<int>(pyr.levels.size()));
    EXPECT_EQ(bytes[8] | bytes[9] << 8, 8);
    EXPECT_EQ(bytes[10] | bytes[11] << 8, 2);
    EXPECT_EQ(bytes[12] | bytes[13] << 8, 8);
    EXPECT_EQ(bytes[14] | bytes[15] << 8, 6);
}

TEST(Avpf, ParserRejectsDamage)
{
    std::mt19937_64 rng(3);
    const auto bytes = serialize_pyramid(random_pyramid(rng, 48, 48));
    for (std::size_t i : {0, 1, 2, 3, 4, 5, 6, 7, 12, 13, 14, 15}) {
        auto bad = bytes;
        bad[i] ^= 0xFF;
        EXPECT_THROW(parse_pyramid(bad), Error) << "byte " << i;
    }
    EXPECT_THROW(parse_pyramid(std::span(bytes).first(bytes.size() - 1)), Error);
    EXPECT_THROW(parse_pyramid(std::span(bytes).first(5)), Error);
    auto longer = bytes;
    longer.push_back(0);
    EXPECT_THROW(parse_pyramid(longer), Error);
}

// --- pyramid store ---------------------------------------------------------

TEST(PyramidStore, PutGetAndMiss)
{
    TempDir dir("store");
    std::mt19937_64 rng(4);
    PyramidStore store(dir.path());
    const auto pyr = random_pyramid(rng, 56, 40);
    EXPECT_FALSE(store.get(key(1)).has_value());
    store.put(key(1), pyr);
    EXPECT_TRUE(store.contains(key(1)));
    EXPECT_TRUE(std::filesystem::exists(dir / (key(1).file_stem() + ".avpf")));
    const auto back = store.get(key(1), PyramidParams{});
    ASSERT_TRUE(back.has_value());
    EXPECT_EQ(*back, pyr);
    const auto s = store.stats();
    EXPECT_EQ(s.hits, 1u);
    EXPECT_EQ(s.misses, 1u);
    EXPECT_EQ(s.puts, 1u);
    EXPECT_EQ(store.total_bytes(), avpf_size(pyr));
}

TEST(PyramidStore, EveryHeaderByteFlipIsCaught)
{
    std::mt19937_64 rng(5);
    const auto pyr = random_pyramid(rng, 48, 48);
    for (std::size_t i = 0; i < 16; ++i) {
        TempDir dir("flip");
        std::ostringstream log;
        PyramidStore store(dir.path(), &log);
        store.put(key(7), pyr);
        auto bytes = detail::read_file_bytes(store.path_for(key(7)));
        bytes[i] ^= 0xFF;
        detail::write_file_atomic(store.path_for(key(7)), bytes);
        EXPECT_FALSE(store.get(key(7), PyramidParams{}).has_value()) << "byte " << i;
        EXPECT_FALSE(std::filesystem::exists(store.path_for(key(7)))) << "byte " << i;
        EXPECT_FALSE(store.contains(key(7)));
        EXPECT_EQ(store.stats().corrupt, 1u);
        EXPECT_NE(log.str().find("corrupt"), std::string::npos);
        // The caller rebuilds and the entry becomes usable again.
        store.put(key(7), pyr);
        EXPECT_EQ(store.get(key(7), PyramidParams{}), pyr);
    }
}

TEST(PyramidStore, TruncatedFileIsCorrupt)
{
    TempDir dir("trunc");
    std::mt19937_64 rng(6);
    PyramidStore store(dir.path());
    store.put(key(1), random_pyramid(rng, 48, 48));
    std::filesystem::resize_file(store.path_for(key(1)), 100);
    EXPECT_FALSE(store.get(key(1)).has_value());
    EXPECT_EQ(store.stats().corrupt, 1u);
}

TEST(PyramidStore, LeastRecentlyUsedIsEvictedFirst)
{
    TempDir dir("lru");
    std::mt19937_64 rng(7);
    PyramidStore store(dir.path());
    const auto pyr = random_pyramid(rng, 48, 48);
    const auto size = avpf_size(pyr);
    store.put(key(1), pyr); // A
    store.put(key(2), pyr); // B
    store.put(key(3), pyr); // C
    ASSERT_TRUE(store.get(key(1)).has_value());
    EXPECT_EQ(store.evict_to_budget(2 * size), 1u);
    EXPECT_TRUE(store.contains(key(1)));
    EXPECT_FALSE(store.contains(key(2)));
    EXPECT_TRUE(store.contains(key(3)));
    EXPECT_FALSE(std::filesystem::exists(store.path_for(key(2))));

    store.put(key(4), pyr);
    EXPECT_EQ(store.evict_to_budget(2 * size), 1u);
    EXPECT_FALSE(store.contains(key(3)));
    EXPECT_EQ(store.evict_to_budget(2 * size), 0u);
    EXPECT_EQ(store.evict_to_budget(0), 2u);
    EXPECT_EQ(store.entry_count(), 0u);
    EXPECT_EQ(bytes_on_disk(dir.path()), 0u);
    EXPECT_EQ(store.stats().evicted, 4u);
}

TEST(PyramidStore, ReopenOrdersByModificationTime)
{
    TempDir dir("reopen");
    std::mt19937_64 rng(8);
    const auto pyr = random_pyramid(rng, 48, 48);
    {
        PyramidStore store(dir.path());
        for (std::uint64_t k = 1; k <= 3; ++k)
            store.put(key(k), pyr);
    }
    const auto now = std::filesystem::file_time_type::clock::now();
    PyramidStore probe(dir.path());
    std::filesystem::last_write_time(probe.path_for(key(1)), now - std::chrono::seconds(10));
    std::filesystem::last_write_time(probe.path_for(key(2)), now - std::chrono::seconds(30));
    std::filesystem::last_write_time(probe.path_for(key(3)), now - std::chrono::seconds(20));
    std::ofstream(dir / "notes.txt") << "ignored";

    PyramidStore store(dir.path());
    EXPECT_EQ(store.entry_count(), 3u);
    EXPECT_EQ(store.total_bytes(), 3 * avpf_size(pyr));
    store.evict_to_budget(2 * avpf_size(pyr));
    EXPECT_FALSE(store.contains(key(2)));
    store.evict_to_budget(avpf_size(pyr));
    EXPECT_FALSE(store.contains(key(3)));
    EXPECT_TRUE(store.contains(key(1)));
    EXPECT_TRUE(std::filesystem::exists(dir / "notes.txt"));
}

TEST(PyramidStore, BudgetHoldsAcrossRandomWorkload)
{
    TempDir dir("budget");
    std::mt19937_64 rng(9);
    std::vector<FeaturePyramid> pool;
    for (int i = 0; i < 4; ++i)
        pool.push_back(random_pyramid(rng, 40 + 12 * i, 40 + 8 * i));
    PyramidStore store(dir.path());
    const std::uintmax_t budget = avpf_size(pool[3]) + avpf_size(pool[1]);
    std::uniform_int_distribution<int> pick(0, 3), k(1, 12), op(0, 2);
    for (int step = 0; step < 200; ++step) {
        const CacheKey kk = key(static_cast<std::uint64_t>(k(rng)));
        if (op(rng) == 0)
            store.get(kk);
        else
            store.put(kk, pool[pick(rng)]);
        store.evict_to_budget(budget);
        ASSERT_LE(store.total_bytes(), budget);
        ASSERT_EQ(bytes_on_disk(dir.path()), store.total_bytes());
    }
}

TEST(PyramidStore, ConcurrentReadersSeeIdenticalData)
{
    TempDir dir("concurrent");
    std::mt19937_64 rng(10);
    const auto pyr = random_pyramid(rng, 64, 64);
    PyramidStore store(dir.path());
    store.put(key(1), pyr);
    std::atomic<int> good{0};
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t)
        threads.emplace_back([&] {
            for (int i = 0; i < 25; ++i) {
                const auto got = store.get(key(1));
                good += got && *got == pyr;
            }
        });
    // A concurrent writer replacing the entry with identical content never exposes a partial file.
    for (int i = 0; i < 10; ++i)
        store.put(key(1), pyr);
    for (auto& t : threads)
        t.join();
    EXPECT_EQ(good.load(), 100);
    EXPECT_EQ(store.stats().corrupt, 0u);
}

// --- detection index -------------------------------------------------------

TEST(Index, SaveLoadRoundTrip)
{
    TempDir dir("index");
    std::vector<IndexRecord> recs{
        record("b", 3, {{"car", 0.5, {1, 2, 3, 4}, 2}}),
        record("a", 10, {}),
        record("a", 2, {{"car", -0.25, {0, 0, 10, 10}, 0}, {"dog", 1.0 / 3.0, {5, 5, 6, 6}, 9}}),
    };
    sort_index(recs);
    EXPECT_EQ(recs[0].frame_no, 2);
    EXPECT_EQ(recs[1].frame_no, 10);
    EXPECT_EQ(recs[2].media_id, "b");
    save_index(dir / "i.avix", recs);
    std::size_t skipped = 99;
    EXPECT_EQ(load_index(dir / "i.avix", &skipped), recs);
    EXPECT_EQ(skipped, 0u);

    std::ifstream in(dir / "i.avix");
    std::string first;
    std::getline(in, first);
    EXPECT_EQ(first, "AVIX 1");
}

TEST(Index, AppendCreatesHeaderAndSkipsCorruptLines)
{
    TempDir dir("append");
    const auto path = dir / "i.avix";
    EXPECT_TRUE(load_index(path).empty());
    append_index(path, {record("a", 0, {})});
    append_index(path, {record("a", 1, {{"car", 2.0, {0, 0, 1, 1}, 0}})});
    {
        std::ofstream out(path, std::ios::app);
        out << "{\"media_id\": \"a\", \"frame_no\": 2\n";  // truncated write
        out << "not json at all\n";
        out << "{\"media_id\":\"a\",\"frame_no\":-1,\"frame_time\":0,\"detections\":[]}\n";
    }
    append_index(path, {record("a", 3, {})});
    std::size_t skipped = 0;
    const auto recs = load_index(path, &skipped);
    ASSERT_EQ(recs.size(), 3u);
    EXPECT_EQ(skipped, 3u);
    EXPECT_EQ(recs[1].detections[0].score, 2.0);

    std::ofstream(dir / "bad.avix") << "XYZ\n";
    EXPECT_THROW(load_index(dir / "bad.avix"), Error);
}

TEST(Index, QueryRanksAndFilters)
{
    const std::vector<IndexRecord> recs{
        record("v", 0, {{"car", 0.2, {}, 0}, {"car", 0.9, {}, 1}}),
        record("v", 1, {{"dog", 5.0, {}, 0}}),
        record("a", 7, {{"car", 0.9, {}, 0}}),
        record("b", 1, {{"car", -1.0, {}, 0}}),
    };
    const auto all = query_index(recs, "car", -std::numeric_limits<double>::infinity());
    ASSERT_EQ(all.size(), 3u);
    EXPECT_EQ(all[0].record, 2u); // tie at 0.9 broken by media id
    EXPECT_EQ(all[1].record, 0u);
    EXPECT_EQ(all[2].record, 3u);
    EXPECT_EQ(all[1].best_score, 0.9);

    EXPECT_EQ(query_index(recs, "car", 0.0).size(), 2u);
    EXPECT_EQ(query_index(recs, "car", 0.9).size(), 2u);
    EXPECT_EQ(query_index(recs, "car", 0.95).size(), 0u);
    EXPECT_EQ(query_index(recs, "car", 0.0, std::string("v")).size(), 1u);
    EXPECT_EQ(query_index(recs, "cat", -1e9).size(), 0u);
    EXPECT_EQ(recs[0].best_score("car"), 0.9);
    EXPECT_FALSE(recs[1].best_score("car").has_value());
}

TEST(Index, RaisingMinScoreNeverAddsResults)
{
    std::mt19937_64 rng(11);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<IndexRecord> recs;
    for (int i = 0; i < 100; ++i) {
        std::vector<IndexDetection> dets;
        for (int k = 0; k < i % 4; ++k)
            dets.push_back({k % 2 ? "car" : "dog", g(rng), {}, k});
        recs.push_back(record("m" + std::to_string(i % 7), i, dets));
    }
    std::vector<std::size_t> previous;
    for (double t = -3.0; t <= 3.0; t += 0.25) {
        const auto hits = query_index(recs, "car", t);
        std::vector<std::size_t> ids;
        for (const auto& h : hits) {
            ids.push_back(h.record);
            EXPECT_GE(h.best_score, t);
        }
        std::sort(ids.begin(), ids.end());
        if (t > -3.0) {
            EXPECT_TRUE(std::includes(previous.begin(), previous.end(), ids.begin(), ids.end()));
        }
        previous = ids;
    }
}
