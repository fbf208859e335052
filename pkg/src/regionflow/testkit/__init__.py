"""Desk-scale verification backbone: brute-force oracles, gradient checks,
and a synthetic-city generator with planted structure.

Production modules never import from this subpackage; the dependency runs
strictly the other way.
"""
