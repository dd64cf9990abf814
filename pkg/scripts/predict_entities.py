"""Cost-model speedups for each benchmark entity across the ladder.

Columns count as row size; each foreign key adds one index to maintain.
"""

from coalesce_proxy.bench.schema import ENTITIES, FULL_LADDER
from coalesce_proxy.cost_model import InsertCostParams, predicted_speedup


def main():
    print("entity," + ",".join(map(str, FULL_LADDER)) + ",bound")
    for name, schema in ENTITIES.items():
        p = InsertCostParams.for_entity(schema.text_columns, schema.foreign_keys)
        cells = [f"{predicted_speedup(p, n):.3f}" for n in FULL_LADDER]
        print(",".join([name, *cells, f"{p.speedup_bound:.3f}"]))


if __name__ == "__main__":
    main()
