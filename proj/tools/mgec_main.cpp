#include "mgec/experiment.hpp"

int main(int argc, char** argv) { return mgec::run_cli(argc, argv); }
