"""
Paquete de infraestructura.
"""