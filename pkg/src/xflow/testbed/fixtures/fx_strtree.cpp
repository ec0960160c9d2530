// Ordered tree of long, similar strings; the comparator dominates the runtime.
#include <cstdio>
#include <cstdlib>
#include <map>
#include <string>

struct ByCompare {
    bool operator()(const std::string &a, const std::string &b) const
    {
        return a.compare(b.c_str()) < 0;
    }
};

int main(int argc, char **argv)
{
    long n = argc > 1 ? std::strtol(argv[1], nullptr, 10) : 20000;
    long rounds = argc > 2 ? std::strtol(argv[2], nullptr, 10) : 4;
    const std::string prefix(256, 'n');
    std::map<std::string, long, ByCompare> tree;
    unsigned seed = 12345;
    for (long i = 0; i < n; i++) {
        seed = seed * 1103515245u + 12345u;
        tree.emplace(prefix + std::to_string(seed % 1000003u), i);
    }
    long hits = 0;
    for (long r = 0; r < rounds; r++) {
        seed = 777u + (unsigned)r;
        for (long i = 0; i < n; i++) {
            seed = seed * 1103515245u + 12345u;
            hits += (long)tree.count(prefix + std::to_string(seed % 1000003u));
        }
    }
    std::printf("strtree %zu %ld\n", tree.size(), hits);
    return 0;
}
