"""Write the 11-class procedural shapes dataset (100/20/20 images per class)."""
import argparse

from attnconv.experiments import make_desk_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("root", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    a = p.parse_args()
    print(make_desk_dataset(a.root, seed=a.seed, size=a.size))


if __name__ == "__main__":
    main()
