#include <cstdio>

int main() {
  std::puts("chainseg: command-line interface under construction");
  return 1;
}
