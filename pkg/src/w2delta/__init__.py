"""Boundary W^{2,delta} estimate machinery."""
