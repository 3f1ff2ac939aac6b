#include <cstdio>

int main() {
    std::printf("bevdiff CLI placeholder\n");
    return 0;
}
