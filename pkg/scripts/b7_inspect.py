"""Print parameter and MAC totals for the B0/B7 tables and the default preset."""
import argparse

from attnconv import efficientnet_b0, efficientnet_b7, efftiny, layer_table


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--classes", type=int, default=11)
    a = p.parse_args()
    for name, net in [("efftiny", efftiny(num_classes=a.classes)),
                      ("b0", efficientnet_b0(num_classes=a.classes)),
                      ("b7", efficientnet_b7(num_classes=a.classes))]:
        rows = layer_table(net)
        params, macs = sum(r.params for r in rows), sum(r.macs for r in rows)
        print(f"{name:8s} params {params:>12,d}  macs {macs:>16,d}")


if __name__ == "__main__":
    main()
