"""REST inference service for trained checkpoints"""
