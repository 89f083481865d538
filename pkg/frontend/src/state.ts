/**
 * Console state and the polling refresher. Nothing here is authoritative:
 * every field is refetched from the API; a hard refresh loses nothing.
 */

import { ApiClient, ApiRequestError } from './api.js';
import type { CycleReport, RolloutState, TriageItem } from './types.js';

export interface ConsoleState {
  triage: TriageItem[];
  rollouts: Record<string, RolloutState>;
  report: CycleReport | null;
  openItemId: string | null;
  banner: string | null;
  lastRefreshed: string | null;
}

export function initialState(): ConsoleState {
  return {
    triage: [],
    rollouts: {},
    report: null,
    openItemId: null,
    banner: null,
    lastRefreshed: null,
  };
}

export async function refresh(client: ApiClient, state: ConsoleState): Promise<ConsoleState> {
  const next = { ...state };
  try {
    const [triage, rollouts] = await Promise.all([client.listTriage(), client.listRollouts()]);
    next.triage = triage.items;
    next.rollouts = rollouts.rollouts;
    try {
      next.report = await client.latestReport();
    } catch (error) {
      if (error instanceof ApiRequestError && error.status === 404) {
        next.report = null; // no cycles yet
      } else {
        throw error;
      }
    }
    next.lastRefreshed = new Date().toISOString();
    next.banner = null;
  } catch (error) {
    next.banner = error instanceof Error ? `refresh failed: ${error.message}` : 'refresh failed';
  }
  return next;
}

/**
 * Optimistically drop a labeled item from the pending list; the caller
 * restores it (with a banner) if the API call fails.
 */
export function removeItem(state: ConsoleState, itemId: string): ConsoleState {
  return {
    ...state,
    triage: state.triage.filter((item) => item.item_id !== itemId),
    openItemId: state.openItemId === itemId ? null : state.openItemId,
  };
}

export function restoreItem(state: ConsoleState, item: TriageItem, banner: string): ConsoleState {
  const triage = [...state.triage];
  if (!triage.some((existing) => existing.item_id === item.item_id)) {
    triage.push(item);
  }
  return { ...state, triage, banner };
}

export function conflictBanner(error: unknown): string {
  if (error instanceof ApiRequestError && error.isConflict) {
    return 'already labeled by another operator';
  }
  return error instanceof Error ? error.message : 'request failed';
}
