"""
Paquete de utilidades.
"""