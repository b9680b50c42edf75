"""Homogenization toolkit for periodic nonlocal peridynamic operators."""
