#include <cstdio>

int main() {
    std::puts("mmq: placeholder");
    return 0;
}
