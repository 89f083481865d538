/**
 * Imperative shell: wires the API client, the 5-second poll, and DOM events.
 */

import { ApiClient, ApiRequestError, ConsoleSession } from './api.js';
import {
  ConsoleState,
  conflictBanner,
  initialState,
  refresh,
  removeItem,
  restoreItem,
} from './state.js';
import {
  renderBanner,
  renderReport,
  renderRollouts,
  renderTriageDetail,
  renderTriageList,
} from './views.js';

const POLL_INTERVAL_MS = 5000;
const SETTINGS_KEY = 'flywheel-console-settings';

function loadSession(): ConsoleSession {
  try {
    const raw = localStorage.getItem(SETTINGS_KEY);
    if (raw) return JSON.parse(raw) as ConsoleSession;
  } catch {
    // fall through to defaults
  }
  return { baseUrl: 'http://127.0.0.1:8080', token: '', operator: '' };
}

function saveSession(session: ConsoleSession): void {
  localStorage.setItem(SETTINGS_KEY, JSON.stringify(session));
}

let session = loadSession();
let client = new ApiClient(session);
let state: ConsoleState = initialState();

const bannerEl = document.getElementById('banner')!;
const triageEl = document.getElementById('triage-view')!;
const triageDetailEl = document.getElementById('triage-detail')!;
const rolloutsEl = document.getElementById('rollout-view')!;
const reportEl = document.getElementById('report-view')!;
const refreshedEl = document.getElementById('last-refreshed')!;
const settingsForm = document.getElementById('settings-form') as HTMLFormElement;

function render(): void {
  bannerEl.innerHTML = renderBanner(state.banner);
  triageEl.innerHTML = renderTriageList(state.triage, state.openItemId);
  rolloutsEl.innerHTML = renderRollouts(state.rollouts);
  reportEl.innerHTML = renderReport(state.report);
  refreshedEl.textContent = state.lastRefreshed
    ? `refreshed ${new Date(state.lastRefreshed).toLocaleTimeString()}`
    : 'not refreshed yet';
}

async function doRefresh(): Promise<void> {
  state = await refresh(client, state);
  render();
}

async function openTriageItem(itemId: string): Promise<void> {
  state = { ...state, openItemId: itemId };
  render();
  try {
    const detail = await client.getTriageItem(itemId);
    triageDetailEl.innerHTML = renderTriageDetail(detail);
  } catch (error) {
    state = { ...state, banner: conflictBanner(error) };
    render();
  }
}

async function submitLabel(itemId: string, form: HTMLFormElement): Promise<void> {
  const data = new FormData(form);
  const expert = String(data.get('expert') ?? '').trim();
  const rephrasals = String(data.get('rephrasals') ?? '')
    .split('\n')
    .map((line) => line.trim())
    .filter(Boolean);
  const label: { expert?: string; rephrasals?: string[] } = {};
  if (expert) label.expert = expert;
  if (rephrasals.length > 0) label.rephrasals = rephrasals;
  if (!label.expert && !label.rephrasals) {
    state = { ...state, banner: 'pick a corrected expert or enter rephrasals' };
    render();
    return;
  }
  await mutateItem(itemId, () => client.labelTriage(itemId, label));
}

async function dismissItem(itemId: string): Promise<void> {
  await mutateItem(itemId, () => client.labelTriage(itemId, { dismiss: true }));
}

async function mutateItem(itemId: string, call: () => Promise<unknown>): Promise<void> {
  const item = state.triage.find((candidate) => candidate.item_id === itemId);
  state = removeItem(state, itemId); // optimistic removal
  triageDetailEl.innerHTML = '';
  render();
  try {
    await call();
  } catch (error) {
    if (item && !(error instanceof ApiRequestError && error.isConflict)) {
      state = restoreItem(state, item, conflictBanner(error));
    } else {
      state = { ...state, banner: conflictBanner(error) };
    }
    render();
  }
}

async function rolloutAction(task: string, action: 'approve' | 'rollback'): Promise<void> {
  try {
    if (action === 'approve') {
      await client.approveRollout(task);
    } else {
      await client.rollbackRollout(task);
    }
    await doRefresh();
  } catch (error) {
    state = { ...state, banner: conflictBanner(error) };
    render();
  }
}

document.addEventListener('click', (event) => {
  const target = (event.target as HTMLElement).closest<HTMLElement>('[data-action]');
  if (!target) return;
  const action = target.dataset.action;
  if (action === 'open-triage' && target.dataset.itemId) {
    void openTriageItem(target.dataset.itemId);
  } else if (action === 'dismiss-item' && target.dataset.itemId) {
    void dismissItem(target.dataset.itemId);
  } else if (action === 'approve' && target.dataset.task) {
    void rolloutAction(target.dataset.task, 'approve');
  } else if (action === 'rollback' && target.dataset.task) {
    void rolloutAction(target.dataset.task, 'rollback');
  }
});

document.addEventListener('submit', (event) => {
  const form = event.target as HTMLFormElement;
  if (form.dataset.action === 'label-form' && form.dataset.itemId) {
    event.preventDefault();
    void submitLabel(form.dataset.itemId, form);
  }
});

settingsForm.addEventListener('submit', (event) => {
  event.preventDefault();
  const data = new FormData(settingsForm);
  session = {
    baseUrl: String(data.get('baseUrl') ?? '').replace(/\/$/, ''),
    token: String(data.get('token') ?? ''),
    operator: String(data.get('operator') ?? ''),
  };
  saveSession(session);
  client = new ApiClient(session);
  void doRefresh();
});

(settingsForm.elements.namedItem('baseUrl') as HTMLInputElement).value = session.baseUrl;
(settingsForm.elements.namedItem('token') as HTMLInputElement).value = session.token;
(settingsForm.elements.namedItem('operator') as HTMLInputElement).value = session.operator;

void doRefresh();
setInterval(() => void doRefresh(), POLL_INTERVAL_MS);
