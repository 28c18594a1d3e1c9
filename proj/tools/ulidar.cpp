#include <ulidar/cli.hpp>

int main(int argc, char** argv) { return ulidar::cli::dispatch(argc, argv); }
