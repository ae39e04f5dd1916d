"""
Paquete de repositorios.
"""