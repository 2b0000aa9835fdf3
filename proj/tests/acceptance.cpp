// End-to-end acceptance suite. Placeholder, replaced below.
int main() { return 1; }
