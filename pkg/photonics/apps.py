from django.apps import AppConfig


class PhotonicsConfig(AppConfig):
    name = 'photonics'
