// Acceptance suite: one pass/fail line per criterion. Populated below.
int main() { return 0; }
