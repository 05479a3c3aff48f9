"""Exhaustive enumeration of single-edge injection plans on tiny graphs."""
import itertools

import numpy as np

from nodeinject.graph import DISCRETE, InjectionPlan, candidate_set, inject_node
from nodeinject.models import forward


def corner_attributes(g, bounds):
    """Every bound corner (continuous) or 0/1 vector within the L0 budget (discrete)."""
    if g.attr_kind == DISCRETE:
        for bits in itertools.product((0.0, 1.0), repeat=g.d):
            if sum(bits) <= bounds.l0_budget:
                yield np.array(bits)
    else:
        for pick in itertools.product((0, 1), repeat=g.d):
            yield np.where(np.array(pick) == 1, bounds.hi, bounds.lo)


def successful_plans(model, g, targets, bounds, delta=1, first_only=True):
    """Hardened plans (all edge subsets of size delta x all corners) that flip every target."""
    targets = np.atleast_1d(targets)
    cands = candidate_set(g, targets)
    found = []
    for chosen in itertools.combinations(range(len(cands)), min(delta, len(cands))):
        e = np.zeros(len(cands))
        e[list(chosen)] = 1
        for a in corner_attributes(g, bounds):
            plan = InjectionPlan(a, cands, e, delta, hardened=True)
            probs = forward(model, inject_node(g, plan, bounds))
            if np.all(probs[targets].argmax(axis=1) != g.y[targets]):
                found.append(plan)
                if first_only:
                    return found
    return found
