#include <cstdio>

int main() {
  std::puts("aclip: not yet wired");
  return 1;
}
