// Writes the bundled toy dataset: 10 classes, each a mixture of sub-clusters.
#include <iostream>

#include "clf/taskstream.hpp"

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: make_toy_data <out.csv>\n";
        return 2;
    }
    clf::save_dataset_csv(clf::make_toy_dataset(), argv[1]);
    return 0;
}
