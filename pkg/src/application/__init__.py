"""
Paquete de aplicación.
"""