import math


# [REQUIREMENT] Divide one demand into equal shares, one per candidate path.
# [ORIGINAL TEXT] Each demand of volume d with k candidate paths is divided into k equal shares of size d/k.
# [VERIFIED] yes
def split_demand(demand: float, num_paths: int) -> list[float]:
    # [REQUIREMENT] fill: split_demand
    return []


# [REQUIREMENT] Split every demand.
# [ORIGINAL TEXT] Every demand is split evenly over its paths.
# [VERIFIED] no, needs review
def split_all(demands: list[float], paths: list[int]) -> list[float]:
    # [REQUIREMENT] fill: split_all
    return []
