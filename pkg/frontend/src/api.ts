/**
 * Typed client for the control-plane API.
 *
 * The console mutates the backend through exactly three calls: labeling a
 * triage item, approving a pending rollout, and rolling a task back. All
 * other methods are reads; the console holds no authoritative state.
 */

import type {
  ApiError,
  CycleReport,
  DatasetSummary,
  RolloutState,
  TriageDetail,
  TriageItem,
} from './types.js';

export interface ConsoleSession {
  baseUrl: string;
  token: string;
  operator: string;
}

export class ApiRequestError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }

  /** 409s mean another operator got there first. */
  get isConflict(): boolean {
    return this.status === 409;
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

interface DatasetRecord extends DatasetSummary {
  cycle_id: string;
  examples: {
    example_id: string;
    task: string;
    input: string;
    target: string | string[];
    source: string;
    split: string | null;
  }[];
}

export class ApiClient {
  constructor(
    private session: ConsoleSession,
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private headers(): Record<string, string> {
    const headers: Record<string, string> = { 'Content-Type': 'application/json' };
    if (this.session.token) {
      headers['Authorization'] = `Bearer ${this.session.token}`;
    }
    return headers;
  }

  private async request<T>(method: 'GET' | 'POST', path: string, body?: unknown): Promise<T> {
    const response = await this.fetchImpl(`${this.session.baseUrl}${path}`, {
      method,
      headers: this.headers(),
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!response.ok) {
      let error: ApiError = { code: 'unknown', message: `HTTP ${response.status}` };
      try {
        const payload = (await response.json()) as { error?: ApiError };
        if (payload.error) error = payload.error;
      } catch {
        // non-JSON error body; keep the fallback
      }
      throw new ApiRequestError(response.status, error.code, error.message);
    }
    return (await response.json()) as T;
  }

  private mutate<T>(path: string, body: unknown): Promise<T> {
    if (!this.session.token) {
      return Promise.reject(
        new ApiRequestError(401, 'missing_token', 'set a bearer token before mutating'),
      );
    }
    return this.request<T>('POST', path, body);
  }

  // -- reads ---------------------------------------------------------------

  listTriage(status: 'pending' | 'confirmed_error' | 'dismissed' | 'all' = 'pending') {
    return this.request<{ items: TriageItem[] }>('GET', `/v1/triage?status=${status}`);
  }

  getTriageItem(itemId: string) {
    return this.request<TriageDetail>('GET', `/v1/triage/${itemId}`);
  }

  listRollouts() {
    return this.request<{ rollouts: Record<string, RolloutState> }>('GET', '/v1/rollouts');
  }

  latestReport() {
    return this.request<CycleReport>('GET', '/v1/reports/latest');
  }

  listDatasets(task?: string) {
    const query = task ? `?task=${task}` : '';
    return this.request<{ datasets: DatasetRecord[] }>('GET', `/v1/datasets${query}`);
  }

  // -- the three mutations ---------------------------------------------------

  labelTriage(itemId: string, label: { expert?: string; rephrasals?: string[]; dismiss?: boolean }) {
    return this.mutate<TriageItem>(`/v1/triage/${itemId}/label`, label);
  }

  approveRollout(task: string) {
    return this.mutate<RolloutState>(`/v1/rollouts/${task}/approve`, {});
  }

  rollbackRollout(task: string) {
    return this.mutate<RolloutState>(`/v1/rollouts/${task}/rollback`, {});
  }
}
