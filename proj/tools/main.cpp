#include <iostream>

#include "muse2he/app.hpp"

int main(int argc, char** argv) { return muse2he::cli_dispatch(argc, argv, std::cout, std::cerr); }
